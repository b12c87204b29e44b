"""Occupancy measures ``q[h, s, a, s']`` and the quantities derived from them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConstraintReport:
    max_flow_violation: float
    max_c2_violation: float
    min_entry: float
    stage_sums: list[float] = field(default_factory=list)

    def within(self, tol: float, alpha: float = 0.0) -> bool:
        return (self.max_flow_violation <= tol and self.max_c2_violation <= tol
                and self.min_entry >= alpha - tol)


def free_mask(shape: tuple[int, int, int, int], s1: int) -> np.ndarray:
    """Entries not forced to zero by the initial-state constraint."""
    mask = np.ones(shape, dtype=bool)
    mask[0] = False
    mask[0, s1] = True
    return mask


def occupancy_from_policy(P: np.ndarray, pi: np.ndarray, s1: int) -> np.ndarray:
    if np.any(P < 0) or np.max(np.abs(P.sum(axis=-1) - 1)) > 1e-9:
        raise ValueError("transition rows must be probability distributions")
    H, S, A, _ = P.shape
    q = np.empty((H, S, A, S))
    mu = np.zeros(S)
    mu[s1] = 1.0
    for h in range(H):
        q[h] = mu[:, None, None] * pi[h][:, :, None] * P[h]
        mu = q[h].sum(axis=(0, 1))
    return q


def induced_policy(q: np.ndarray) -> np.ndarray:
    m = q.sum(axis=-1)
    tot = m.sum(axis=-1, keepdims=True)
    A = q.shape[2]
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.where(tot > 0, m / tot, 1.0 / A)
    return pi


def induced_transition(q: np.ndarray) -> np.ndarray:
    tot = q.sum(axis=-1, keepdims=True)
    S = q.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, q / tot, 1.0 / S)


def expected_reward(q: np.ndarray, r: np.ndarray) -> float:
    if q.shape[:3] != r.shape:
        raise ValueError(f"occupancy shape {q.shape} does not match reward shape {r.shape}")
    return float(np.einsum("hsap,hsa->", q, r))


def kl_divergence(q: np.ndarray, q_ref: np.ndarray) -> float:
    """``sum q log(q / q_ref)`` with the convention ``0 log 0 = 0``."""
    pos = q > 0
    if np.any(q_ref[pos] <= 0):
        raise ValueError("q_ref must be positive wherever q is positive")
    return float(np.sum(q[pos] * np.log(q[pos] / q_ref[pos])))


def bregman_kl(q: np.ndarray, q_ref: np.ndarray) -> float:
    """Bregman divergence of the negative entropy (unnormalized KL)."""
    return kl_divergence(q, q_ref) - float(q.sum()) + float(q_ref.sum())


def l1_stage_distance(q: np.ndarray, q_other: np.ndarray) -> float:
    if q.shape != q_other.shape:
        raise ValueError("shape mismatch")
    return float(np.abs(q - q_other).sum())


def flow_residuals(q: np.ndarray, s1: int) -> np.ndarray:
    """``(H, S)`` array of outflow minus required inflow for every (stage, state)."""
    H, S = q.shape[:2]
    out = q.sum(axis=(2, 3))
    res = np.empty((H, S))
    res[0] = out[0] - (np.arange(S) == s1)
    if H > 1:
        res[1:] = out[1:] - q[:-1].sum(axis=(1, 2))
    return res


def validate(q: np.ndarray, s1: int, constraint=None, tol: float = 1e-8) -> ConstraintReport:
    """Violation report for (C1), the transition constraint and the entry floor.

    ``constraint`` may be ``None`` (flow only), a :class:`~oope.env_model.MixtureMDP`
    (rows must equal the true kernel) or a :class:`~oope.projection.ClippedConstraintSet`
    (rows must lie in the image of the confidence ellipsoids). ``min_entry`` is taken
    over entries not forced to zero by the initial state. ``tol`` only sets the mass
    below which a (s, a) row counts as unvisited.
    """
    flow = float(np.abs(flow_residuals(q, s1)).max())
    c2 = 0.0
    if constraint is not None:
        rows = q.sum(axis=-1)
        visited = rows > tol * 1e-3
        cond = induced_transition(q)
        if hasattr(constraint, "row_distances"):
            dist = constraint.row_distances(cond)
        else:
            dist = np.linalg.norm(cond - constraint.P, axis=-1)
        if np.any(visited):
            c2 = float(dist[visited].max())
    mask = free_mask(q.shape, s1)
    return ConstraintReport(
        max_flow_violation=flow,
        max_c2_violation=c2,
        min_entry=float(q[mask].min()),
        stage_sums=[float(x) for x in q.sum(axis=(1, 2, 3))],
    )
