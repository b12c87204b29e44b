"""Exact dynamic-programming oracles, dynamic regret and its four-term split."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env_model import MixtureMDP
from .occupancy import expected_reward


def _transition(mdp_or_P) -> np.ndarray:
    return mdp_or_P.P if isinstance(mdp_or_P, MixtureMDP) else np.asarray(mdp_or_P)


def value_function(P: np.ndarray, pi: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backward induction; returns ``(Q (H,S,A), V (H+1,S))``."""
    H, S, A, _ = P.shape
    Q = np.empty((H, S, A))
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        Q[h] = r[h] + P[h] @ V[h + 1]
        V[h] = np.sum(pi[h] * Q[h], axis=-1)
    return Q, V


def exact_value(mdp, pi: np.ndarray, r: np.ndarray, s1: int = 0) -> float:
    return float(value_function(_transition(mdp), pi, r)[1][0, s1])


def exact_values(mdp, policies: Sequence[np.ndarray], rewards: Sequence[np.ndarray], s1: int = 0) -> np.ndarray:
    """``V^{pi_k}_{k,1}(s1)`` for each episode, batched over k."""
    P = _transition(mdp)
    pis = np.asarray(policies)
    rs = np.asarray(rewards)
    K, H = rs.shape[:2]
    V = np.zeros((K, P.shape[1]))
    for h in range(H - 1, -1, -1):
        Q = rs[:, h] + np.einsum("sap,kp->ksa", P[h], V)
        V = np.sum(pis[:, h] * Q, axis=-1)
    return V[:, s1]


def optimal_policy(mdp, r: np.ndarray) -> np.ndarray:
    """Greedy deterministic policy; ties go to the lowest action index."""
    P = _transition(mdp)
    H, S, A, _ = P.shape
    pi = np.zeros((H, S, A))
    V = np.zeros(S)
    for h in range(H - 1, -1, -1):
        Q = r[h] + P[h] @ V
        best = np.argmax(Q, axis=-1)  # first maximum
        pi[h, np.arange(S), best] = 1.0
        V = Q[np.arange(S), best]
    return pi


def dynamic_regret(policies, comparators, mdp, rewards, s1: int = 0) -> tuple[float, np.ndarray]:
    """Total dynamic regret and its cumulative series, from exact expected values."""
    if len(policies) != len(comparators) or len(policies) != len(rewards):
        raise ValueError("policies, comparators and rewards must have the same length")
    gap = exact_values(mdp, comparators, rewards, s1) - exact_values(mdp, policies, rewards, s1)
    series = np.cumsum(gap)
    return float(series[-1]) if len(series) else 0.0, series


@dataclass
class Decomposition:
    base: np.ndarray        # per-episode <q^c_k - q^{i*}_k, r_k>
    meta: np.ndarray        # <q^{i*}_k - q_k, r_k>
    gap: np.ndarray         # V_hat_{k,1} - V_{k,1}
    estimation: np.ndarray  # V_{k,1} - V^{pi_k}_{k,1}
    best_base: int

    def totals(self) -> tuple[float, float, float, float]:
        return (float(self.base.sum()), float(self.meta.sum()), float(self.gap.sum()),
                float(self.estimation.sum()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["schema_version", "k", "base_term", "meta_term", "gap_term", "estimation_term",
                    "cumulative_regret"])
        cum = np.cumsum(self.base + self.meta + self.gap + self.estimation)
        for k in range(len(self.base)):
            w.writerow([1, k + 1, repr(float(self.base[k])), repr(float(self.meta[k])),
                        repr(float(self.gap[k])), repr(float(self.estimation[k])), repr(float(cum[k]))])
        return buf.getvalue()


def regret_decomposition(history, comparators, mdp, rewards, best_base_index: int | None = None,
                         s1: int = 0) -> Decomposition:
    """Split dynamic regret into base, meta, occupancy-policy-gap and estimation terms.

    ``history`` must expose ``base_payoffs`` (K, N) holding ``<q^i_k, r_k>`` (the
    full-logging record), ``combined_payoffs`` (K,), ``v_optimistic`` (K,) and
    ``policies``. The i* default is the base with the largest cumulative payoff.
    """
    base_payoffs = getattr(history, "base_payoffs", None)
    if base_payoffs is None:
        raise ValueError("history has no per-base payoffs; rerun with full logging enabled")
    base_payoffs = np.asarray(base_payoffs)
    if best_base_index is None:
        best_base_index = int(np.argmax(base_payoffs.sum(axis=0)))
    P = _transition(mdp)
    comp_occ_values = exact_values(P, comparators, rewards, s1)
    played = exact_values(P, history.policies, rewards, s1)
    q_star = base_payoffs[:, best_base_index]
    v_hat = np.asarray(history.combined_payoffs)
    v_opt = np.asarray(history.v_optimistic)
    return Decomposition(
        base=comp_occ_values - q_star,
        meta=q_star - v_hat,
        gap=v_hat - v_opt,
        estimation=v_opt - played,
        best_base=best_base_index,
    )


def occupancy_value(q: np.ndarray, r: np.ndarray) -> float:
    return expected_reward(q, r)
