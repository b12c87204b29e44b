"""The two-layer learner: a pool of mirror-descent bases combined by Hedge."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env_model import MixtureMDP, Trajectory, sample_trajectory
from .occupancy import expected_reward, induced_policy
from .projection import (ClippedConstraintSet, ProjectionConfig, ProjectionError, base_update,
                         project_kl)
from .vtr import RegressionState, in_confidence_set, optimistic_backward_pass, update_regression

log = logging.getLogger(__name__)


def _log_ratio(S: int, A: int, H: int) -> float:
    # log(S^2 A / H) is nonpositive on small instances; clamp at 1
    return max(math.log(S * S * A / H), 1.0)


def pool_size(K: int, H: int, S: int, A: int) -> int:
    T = K * H
    L = _log_ratio(S, A, H)
    return math.ceil(0.5 * math.log(1 + 4 * K * math.log(T) / L)) + 1


def step_size_pool(K: int, H: int, S: int, A: int) -> list[float]:
    if K < 1 or H < 1:
        raise ValueError("K and H must be positive")
    eta1 = math.sqrt(_log_ratio(S, A, H) / K)
    return [eta1 * 2.0**i for i in range(pool_size(K, H, S, A))]


def meta_learning_rate(K: int, H: int, N: int) -> float:
    T = K * H
    if T < 1 or N < 1:
        raise ValueError("need K*H >= 1 and N >= 1")
    return math.sqrt(math.log(N) / (H * T))


def clipping_alpha(K: int, H: int) -> float:
    T = K * H
    return 1.0 / T**2


def meta_regret_bound(K: int, H: int, N: int, eps: float) -> float:
    if N == 1:
        return 0.0
    return math.log(N) / eps + eps * H * H * K


def hedge_update(p: np.ndarray, payoffs, eps: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    z = np.log(np.maximum(p, 1e-300)) + eps * np.asarray(payoffs, dtype=float)
    z = np.where(p > 0, z, -np.inf)
    w = np.exp(z - z.max())
    return w / w.sum()


@dataclass
class EnsembleState:
    etas: np.ndarray
    qs: np.ndarray                    # (N, H, S, A, S)
    p: np.ndarray
    eps: float
    alpha: float
    k: int = 1
    last_reward: np.ndarray | None = None
    last_payoffs: np.ndarray | None = None
    duals: list = field(default_factory=list, repr=False)

    @property
    def N(self) -> int:
        return len(self.etas)

    def combined(self) -> np.ndarray:
        return np.tensordot(self.p, self.qs, axes=1)


@dataclass
class EpisodeRecord:
    k: int
    payoffs: np.ndarray
    meta_weights: np.ndarray
    combined_payoff: float
    v_optimistic: float
    realized_return: float
    proj_iters: int
    proj_flow_violation: float
    proj_c2_violation: float
    proj_failures: int
    coverage: bool
    beta_hat: float
    min_eig_sigma: float
    x_potential: np.ndarray | None = None   # per stage, for the elliptical-potential check
    x_norm: np.ndarray | None = None


def init_ensemble(etas, eps: float, alpha: float, mdp: MixtureMDP, reg: RegressionState, s1: int,
                  cfg: ProjectionConfig | None = None) -> EnsembleState:
    """Every base starts from the uniform array projected once onto the first decision set."""
    H, S, A = mdp.H, mdp.S, mdp.A
    cset = ClippedConstraintSet(alpha, s1, mdp.phi, reg.ellipsoids())
    q0, stats = project_kl(np.full((H, S, A, S), 1.0 / (S * A * S)), cset, cfg)
    N = len(etas)
    return EnsembleState(
        etas=np.asarray(etas, dtype=float), qs=np.repeat(q0[None], N, axis=0),
        p=np.full(N, 1.0 / N), eps=eps, alpha=alpha, duals=[stats.mu] * N,
    )


def run_episode(state: EnsembleState, reg: RegressionState, reward: np.ndarray, mdp: MixtureMDP,
                rng: np.random.Generator, s1: int = 0, cfg: ProjectionConfig | None = None,
                policy_override: np.ndarray | None = None):
    """Play one episode; returns ``(state, reg, record, policy, trajectory)``.

    Base and meta updates at episode k use the reward of episode k-1, the latest one
    revealed before the policy is committed.
    """
    conf = reg.ellipsoids()
    qs = state.qs.copy()
    p = state.p
    duals = list(state.duals)
    iters = 0
    failures = 0
    flow_v = 0.0
    c2_v = 0.0
    if state.last_reward is not None:
        cset = ClippedConstraintSet(state.alpha, s1, mdp.phi, conf)
        for i, eta in enumerate(state.etas):
            try:
                qs[i], stats = base_update(qs[i], state.last_reward, eta, cset, cfg, duals[i])
                duals[i] = stats.mu
                iters += stats.outer_iters
                flow_v = max(flow_v, stats.report.max_flow_violation)
                c2_v = max(c2_v, stats.report.max_c2_violation)
            except ProjectionError as exc:
                failures += 1
                log.warning("episode %d base %d: projection failed (%s); keeping previous iterate",
                            state.k, i, exc)
        p = hedge_update(p, state.last_payoffs, state.eps)
    q_hat = np.tensordot(p, qs, axes=1)
    pi = induced_policy(q_hat) if policy_override is None else policy_override
    traj = sample_trajectory(mdp, pi, reward, s1, rng)

    payoffs = np.array([expected_reward(q, reward) for q in qs])
    values = optimistic_backward_pass(conf, reward, pi, mdp.phi)
    coverage = all(in_confidence_set(mdp.theta_star[h], conf[h]) for h in range(mdp.H))
    new_reg, info = update_regression(reg, traj, values, mdp.phi)
    record = EpisodeRecord(
        k=state.k, payoffs=payoffs, meta_weights=p.copy(),
        combined_payoff=float(p @ payoffs), v_optimistic=float(values.V[0, s1]),
        realized_return=float(traj.rewards.sum()), proj_iters=iters,
        proj_flow_violation=flow_v, proj_c2_violation=c2_v, proj_failures=failures,
        coverage=bool(coverage), beta_hat=conf[0].radius,
        min_eig_sigma=float(min(np.linalg.eigvalsh(e.shape)[0] for e in conf)),
        x_potential=info.x_potential, x_norm=info.x_norm,
    )
    new_state = EnsembleState(
        etas=state.etas, qs=qs, p=p, eps=state.eps, alpha=state.alpha, k=state.k + 1,
        last_reward=reward, last_payoffs=payoffs, duals=duals,
    )
    return new_state, new_reg, record, pi, traj


@dataclass
class RunHistory:
    records: list[EpisodeRecord]
    policies: np.ndarray          # (K, H, S, A)
    rewards: np.ndarray           # (K, H, S, A)
    trajectories: list[Trajectory]
    etas: np.ndarray
    eps: float
    lam: float
    d: int
    base_occupancies: np.ndarray | None = None   # (K, N, H, S, A, S) when full logging is on
    combined_occupancies: np.ndarray | None = None

    @property
    def K(self) -> int:
        return len(self.records)

    @property
    def base_payoffs(self) -> np.ndarray:
        return np.array([r.payoffs for r in self.records])

    @property
    def combined_payoffs(self) -> np.ndarray:
        return np.array([r.combined_payoff for r in self.records])

    @property
    def v_optimistic(self) -> np.ndarray:
        return np.array([r.v_optimistic for r in self.records])

    @property
    def coverage(self) -> np.ndarray:
        return np.array([r.coverage for r in self.records])

    @property
    def x_potential(self) -> np.ndarray:
        return np.array([r.x_potential for r in self.records])   # (K, H)

    @property
    def x_norm(self) -> np.ndarray:
        return np.array([r.x_norm for r in self.records])


def run(mdp: MixtureMDP, adversary, K: int, rng: np.random.Generator, *, etas=None, s1: int = 0,
        lam: float = 1.0, delta: float = 0.1, cfg: ProjectionConfig | None = None,
        full_logging: bool = False, policy_override: np.ndarray | None = None,
        on_episode: Callable | None = None) -> RunHistory:
    """Run K episodes against ``adversary`` (anything with ``reward(k, counts)``)."""
    H, S, A = mdp.H, mdp.S, mdp.A
    if etas is None:
        etas = step_size_pool(K, H, S, A)
    eps = meta_learning_rate(K, H, len(etas))
    # 1/T^2 exceeds the largest feasible floor 1/(S^2 A) only for tiny K*H
    alpha = min(clipping_alpha(K, H), 0.5 / (S * S * A))
    reg = RegressionState(H=H, d=mdp.d, lam=lam, delta=delta, B=mdp.B)
    state = init_ensemble(etas, eps, alpha, mdp, reg, s1, cfg)
    counts = np.zeros((H, S, A))
    records, policies, rewards, trajs = [], [], [], []
    base_occ, comb_occ = [], []
    for k in range(K):
        r = np.asarray(adversary.reward(k, counts.copy()), dtype=float)
        if np.any(r < 0) or np.any(r > 1):
            raise ValueError(f"adversary produced rewards outside [0, 1] at episode {k}")
        state, reg, rec, pi, traj = run_episode(state, reg, r, mdp, rng, s1, cfg, policy_override)
        counts[np.arange(H), traj.states[:H], traj.actions] += 1
        records.append(rec)
        policies.append(pi)
        rewards.append(r)
        trajs.append(traj)
        if full_logging:
            base_occ.append(state.qs.copy())
            comb_occ.append(state.combined())
        if on_episode is not None:
            on_episode(rec)
    return RunHistory(
        records=records, policies=np.array(policies), rewards=np.array(rewards), trajectories=trajs,
        etas=np.asarray(etas, dtype=float), eps=eps, lam=lam, d=mdp.d,
        base_occupancies=np.array(base_occ) if full_logging else None,
        combined_occupancies=np.array(comb_occ) if full_logging else None,
    )
