"""Linear mixture MDP instances, adversaries, comparators and path lengths.

Array conventions used across the package (0-indexed stages):

* transition ``P``: ``(H, S, A, S)``, ``P[h, s, a, s']``
* feature tensor ``phi``: ``(S, A, S, d)``, ``phi[s, a, s', j]``
* policy ``pi``: ``(H, S, A)``, rows sum to one
* reward ``r``: ``(H, S, A)`` with entries in ``[0, 1]``
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import stream

DEFAULT_P_FLOOR = 1e-3


@dataclass
class MixtureMDP:
    """Episodic MDP whose stage-h kernel is ``<phi(s'|s,a), theta_star[h]>``."""

    phi: np.ndarray
    theta_star: np.ndarray
    B: float
    p_floor: float = DEFAULT_P_FLOOR
    seed: int | None = None
    _P: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.phi = np.ascontiguousarray(self.phi, dtype=float)
        self.theta_star = np.ascontiguousarray(np.atleast_2d(self.theta_star), dtype=float)
        if self.phi.ndim != 4 or self.phi.shape[0] != self.phi.shape[2]:
            raise ValueError(f"phi must have shape (S, A, S, d), got {self.phi.shape}")
        if self.theta_star.shape[1] != self.phi.shape[3]:
            raise ValueError("theta_star and phi disagree on the feature dimension")

    @property
    def S(self) -> int:
        return self.phi.shape[0]

    @property
    def A(self) -> int:
        return self.phi.shape[1]

    @property
    def H(self) -> int:
        return self.theta_star.shape[0]

    @property
    def d(self) -> int:
        return self.phi.shape[3]

    @property
    def P(self) -> np.ndarray:
        if self._P is None:
            self._P = np.einsum("sapj,hj->hsap", self.phi, self.theta_star)
        return self._P

    def validate(self, n_random_values: int = 64, seed: int = 0) -> None:
        """Raise ``ValueError`` if any defining property of the instance fails."""
        P = self.P
        sums = P.sum(axis=-1)
        if np.max(np.abs(sums - 1.0)) > 1e-10:
            raise ValueError(f"transition rows do not sum to one (max error {np.max(np.abs(sums - 1)):.3g})")
        if P.min() < min(self.p_floor, 0.0) - 1e-12 or P.max() > 1 + 1e-12:
            raise ValueError("transition probabilities outside [0, 1]")
        if P.min() < self.p_floor - 1e-12:
            raise ValueError(f"transition probability {P.min():.3g} below floor {self.p_floor}")
        norms = np.linalg.norm(self.theta_star, axis=1)
        if np.any(norms > self.B + 1e-12):
            raise ValueError(f"theta_star norm {norms.max():.4g} exceeds B={self.B}")
        rng = np.random.default_rng(seed)
        values = np.vstack([np.ones(self.S), rng.random((n_random_values, self.S))])
        for v in values:
            fv = np.einsum("sapj,p->saj", self.phi, v)
            if np.linalg.norm(fv, axis=-1).max() > 1 + 1e-12:
                raise ValueError("value-weighted feature norm exceeds one")

    def to_dict(self) -> dict:
        return {
            "S": self.S,
            "A": self.A,
            "H": self.H,
            "d": self.d,
            "phi_axes": "s,a,s_next,j",
            "phi": self.phi.tolist(),
            "theta_star": self.theta_star.tolist(),
            "B": float(self.B),
            "p_floor": float(self.p_floor),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MixtureMDP":
        return cls(
            phi=np.array(doc["phi"], dtype=float),
            theta_star=np.array(doc["theta_star"], dtype=float),
            B=float(doc["B"]),
            p_floor=float(doc["p_floor"]),
            seed=doc.get("seed"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MixtureMDP":
        return cls.from_dict(json.loads(text))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def mdp_from_kernels(kernels: np.ndarray, weights: np.ndarray, p_floor: float | None = None) -> MixtureMDP:
    """Mixture instance from ``d`` base kernels ``(d, S, A, S)`` and stage weights ``(H, d)``.

    Weights must lie on the simplex. Uses the same 1/sqrt(d) feature scaling as
    :func:`build_random_mixture_mdp`.
    """
    kernels = np.asarray(kernels, dtype=float)
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    d = kernels.shape[0]
    if np.any(weights < 0) or np.max(np.abs(weights.sum(axis=1) - 1)) > 1e-12:
        raise ValueError("stage weights must lie on the simplex")
    root = np.sqrt(d)
    phi = np.moveaxis(kernels, 0, -1) / root
    floor = float(kernels.min()) if p_floor is None else p_floor
    return MixtureMDP(phi=phi, theta_star=root * weights, B=root, p_floor=floor)


def build_random_mixture_mdp(seed: int, S: int, A: int, H: int, d: int,
                             p_floor: float = DEFAULT_P_FLOOR) -> MixtureMDP:
    if S < 2 or A < 2 or H < 1 or d < 1:
        raise ValueError(f"need S>=2, A>=2, H>=1, d>=1; got S={S}, A={A}, H={H}, d={d}")
    if not 0 < p_floor < 1.0 / S:
        raise ValueError(f"p_floor must lie in (0, 1/S), got {p_floor}")
    rng = stream(seed, "env")
    raw = rng.dirichlet(np.ones(S), size=(d, S, A))
    kernels = p_floor + (1.0 - S * p_floor) * raw
    weights = rng.dirichlet(np.ones(d), size=H) if d > 1 else np.ones((H, 1))
    mdp = mdp_from_kernels(kernels, weights, p_floor=p_floor)
    mdp.seed = int(seed)
    mdp.validate()
    return mdp


def check_policy(pi: np.ndarray, tol: float = 1e-12) -> None:
    if np.any(pi < 0):
        raise ValueError("policy has negative entries")
    if np.max(np.abs(pi.sum(axis=-1) - 1.0)) > tol:
        raise ValueError("policy rows do not sum to one")


def check_reward(r: np.ndarray) -> None:
    if np.any(r < 0) or np.any(r > 1):
        raise ValueError("rewards must lie in [0, 1]")


@dataclass
class Trajectory:
    states: np.ndarray    # (H+1,)
    actions: np.ndarray   # (H,)
    rewards: np.ndarray   # (H,)


def _draw(p: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
    return min(idx, len(p) - 1)


def sample_trajectory(mdp: MixtureMDP, policy: np.ndarray, reward: np.ndarray, s1: int,
                      rng: np.random.Generator) -> Trajectory:
    """Roll out one episode; consumes exactly ``2H`` uniforms from ``rng``."""
    if not 0 <= s1 < mdp.S:
        raise ValueError(f"initial state {s1} out of range")
    check_policy(policy, tol=1e-9)
    P = mdp.P
    H = mdp.H
    states = np.empty(H + 1, dtype=np.int64)
    actions = np.empty(H, dtype=np.int64)
    rewards = np.empty(H)
    states[0] = s1
    u = rng.random(2 * H)
    for h in range(H):
        s = states[h]
        a = _draw(policy[h, s], u[2 * h])
        actions[h] = a
        rewards[h] = reward[h, s, a]
        states[h + 1] = _draw(P[h, s, a], u[2 * h + 1])
    return Trajectory(states, actions, rewards)


# --- adversaries -----------------------------------------------------------

def make_reward_sequence(kind: str, K: int, switches: int, seed: int, shape: tuple[int, int, int],
                         drift_budget: float = 0.0,
                         play_counts: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Reward functions ``r_1..r_K`` for an oblivious or history-driven adversary.

    ``piecewise`` redraws a uniform reward at each of ``switches + 1`` equal blocks.
    ``drift`` interpolates between two random rewards with per-episode l1 change at
    most ``drift_budget``. ``targeted`` needs ``play_counts[k]``, the (H, S, A) visit
    counts before episode k, and is replayed through :class:`TargetedAdversary`.
    """
    if switches < 0:
        raise ValueError("switches must be >= 0")
    rng = stream(seed, "adversary")
    if kind == "piecewise":
        n_blocks = switches + 1
        blocks = rng.random((n_blocks,) + tuple(shape))
        return [blocks[k * n_blocks // K].copy() for k in range(K)]
    if kind == "drift":
        start = rng.random(shape)
        end = rng.random(shape)
        gap = np.abs(end - start).sum()
        # l1 change per episode <= |d lambda| * gap <= omega / 2 * gap
        omega = 0.0 if gap == 0 else min(2.0 * drift_budget / gap, np.pi)
        out = []
        for k in range(K):
            lam = 0.5 * (1.0 - np.cos(omega * k))
            out.append((1.0 - lam) * start + lam * end)
        return out
    if kind == "targeted":
        if play_counts is None or len(play_counts) < K:
            raise ValueError("targeted rewards are a function of play counts; pass one array per episode")
        adv = TargetedAdversary(shape, seed)
        return [adv.reward(k, play_counts[k]) for k in range(K)]
    raise ValueError(f"unknown reward kind {kind!r}")


class TargetedAdversary:
    """Rewards the actions the learner has tried least so far.

    ``reward(k, counts)`` must be called for k = 0, 1, ... in order; the base noise
    comes from a dedicated stream so the sequence is a pure function of the counts.
    """

    def __init__(self, shape: tuple[int, int, int], seed: int, noise: float = 0.25):
        self.shape = tuple(shape)
        self.noise = noise
        self._rng = stream(seed, "adversary")
        self._k = 0

    def reward(self, k: int, counts: np.ndarray) -> np.ndarray:
        if k != self._k:
            raise ValueError(f"targeted adversary queried out of order (expected episode {self._k}, got {k})")
        self._k += 1
        base = self._rng.random(self.shape)
        favored = np.argmin(counts, axis=-1)
        bonus = np.zeros(self.shape)
        np.put_along_axis(bonus, favored[..., None], 1.0, axis=-1)
        return self.noise * base + (1.0 - self.noise) * bonus


class ObliviousAdversary:
    def __init__(self, rewards: Sequence[np.ndarray]):
        self.rewards = list(rewards)

    def reward(self, k: int, counts: np.ndarray | None = None) -> np.ndarray:
        return self.rewards[k]


# --- comparators -------------------------------------------------------------

def make_comparators(kind: str, rewards: Sequence[np.ndarray], mdp: MixtureMDP, L: int = 1) -> list[np.ndarray]:
    from .oracle import optimal_policy

    K = len(rewards)
    if kind == "fixed_best":
        best = optimal_policy(mdp, np.sum(rewards, axis=0))
        return [best] * K
    if kind == "per_episode_best":
        return [optimal_policy(mdp, r) for r in rewards]
    if kind == "piecewise_best":
        if L < 1:
            raise ValueError("piecewise_best needs L >= 1")
        out: list[np.ndarray] = []
        for block in np.array_split(np.arange(K), L):
            if len(block) == 0:
                continue
            best = optimal_policy(mdp, np.sum([rewards[k] for k in block], axis=0))
            out.extend([best] * len(block))
        return out
    raise ValueError(f"unknown comparator kind {kind!r}")


def path_length(comparators: Sequence[np.ndarray], mdp: MixtureMDP,
                s1_list: Sequence[int] | int = 0) -> tuple[float, float]:
    """Policy path length ``P_K`` and occupancy path length ``Pbar_K``."""
    from .occupancy import occupancy_from_policy, l1_stage_distance

    K = len(comparators)
    if K < 2:
        return 0.0, 0.0
    if np.isscalar(s1_list):
        s1_list = [int(s1_list)] * K
    pk = 0.0
    pbar = 0.0
    prev_q = occupancy_from_policy(mdp.P, comparators[0], s1_list[0])
    for k in range(1, K):
        diff = np.abs(comparators[k] - comparators[k - 1]).sum(axis=-1)  # (H, S)
        pk += diff.max(axis=-1).sum()
        q = occupancy_from_policy(mdp.P, comparators[k], s1_list[k])
        pbar += l1_stage_distance(q, prev_q)
        prev_q = q
    return float(pk), float(pbar)
