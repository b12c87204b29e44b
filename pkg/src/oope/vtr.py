"""Variance-aware value-targeted regression and the confidence ellipsoids it yields."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .env_model import Trajectory


def confidence_radii(k: int, lam: float, delta: float, d: int, H: int, B: float) -> tuple[float, float, float]:
    """Radii ``(beta_hat, beta_bar, beta_tilde)`` used at episode ``k`` (1-indexed)."""
    if k < 1 or lam <= 0 or not 0 < delta < 1:
        raise ValueError("need k >= 1, lam > 0 and delta in (0, 1)")
    log_conf = math.log(4 * k * k * H / delta)
    log_det = math.log(1 + k / lam)
    tail = 4 * math.sqrt(d) * log_conf + math.sqrt(lam) * B
    beta_hat = 8 * math.sqrt(d * log_det * log_conf) + tail
    beta_bar = 8 * d * math.sqrt(log_det * log_conf) + tail
    beta_tilde = (8 * H**2 * math.sqrt(d * math.log(1 + k * H**4 / (d * lam)) * log_conf)
                  + 4 * H**2 * log_conf + math.sqrt(lam) * B)
    return beta_hat, beta_bar, beta_tilde


def phi_of_value(phi: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``phi_V(s, a) = sum_s' phi(s'|s, a) V(s')``, shape ``(S, A, d)``."""
    return np.einsum("sapj,p->saj", phi, V)


@dataclass
class ConfidenceEllipsoid:
    """``{theta : ||shape^{1/2} (theta - center)||_2 <= radius}``."""

    center: np.ndarray
    shape: np.ndarray
    radius: float
    _chol: tuple | None = field(default=None, init=False, repr=False)

    @property
    def chol(self):
        if self._chol is None:
            try:
                self._chol = cho_factor(self.shape, lower=True)
            except np.linalg.LinAlgError as exc:
                raise ValueError("ellipsoid shape matrix is not positive definite") from exc
        return self._chol

    def lower(self) -> np.ndarray:
        c, _ = self.chol
        return np.tril(c)

    def mahalanobis(self, theta: np.ndarray) -> float:
        diff = np.asarray(theta, dtype=float) - self.center
        return math.sqrt(max(float(diff @ self.shape @ diff), 0.0))

    def inverse_norm(self, x: np.ndarray) -> np.ndarray:
        """``||x||_{shape^{-1}}`` along the last axis."""
        flat = np.reshape(x, (-1, x.shape[-1]))
        sol = cho_solve(self.chol, flat.T).T
        val = np.maximum(np.einsum("ij,ij->i", flat, sol), 0.0)
        return np.sqrt(val).reshape(x.shape[:-1])


def in_confidence_set(theta: np.ndarray, ell: ConfidenceEllipsoid, rtol: float = 1e-12) -> bool:
    if np.shape(theta) != ell.center.shape:
        raise ValueError("dimension mismatch")
    return ell.mahalanobis(theta) <= ell.radius * (1 + rtol)


@dataclass
class OptimisticValues:
    Q: np.ndarray  # (H, S, A)
    V: np.ndarray  # (H + 1, S); V[H] = 0


def optimistic_backward_pass(conf: list[ConfidenceEllipsoid], reward: np.ndarray, pi: np.ndarray,
                             phi: np.ndarray) -> OptimisticValues:
    """Clipped optimistic Bellman backups; the ellipsoid maximum is taken in closed form."""
    H, S, A = reward.shape
    Q = np.empty((H, S, A))
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        ell = conf[h]
        fv = phi_of_value(phi, V[h + 1])
        upper = fv @ ell.center + ell.radius * ell.inverse_norm(fv)
        Q[h] = np.clip(reward[h] + upper, 0.0, H)
        V[h] = np.sum(pi[h] * Q[h], axis=-1)
    return OptimisticValues(Q, V)


@dataclass
class RegressionState:
    """Per-stage accumulators; ``k`` is the index of the episode about to be played."""

    H: int
    d: int
    lam: float = 1.0
    delta: float = 0.1
    B: float = 1.0
    k: int = 1
    sigma_hat: np.ndarray | None = None
    b_hat: np.ndarray | None = None
    sigma_tilde: np.ndarray | None = None
    b_tilde: np.ndarray | None = None
    theta_hat: np.ndarray | None = None
    theta_tilde: np.ndarray | None = None

    def __post_init__(self):
        eye = self.lam * np.eye(self.d)
        if self.sigma_hat is None:
            self.sigma_hat = np.repeat(eye[None], self.H, axis=0)
            self.sigma_tilde = np.repeat(eye[None], self.H, axis=0)
            self.b_hat = np.zeros((self.H, self.d))
            self.b_tilde = np.zeros((self.H, self.d))
            self.theta_hat = np.zeros((self.H, self.d))
            self.theta_tilde = np.zeros((self.H, self.d))

    def copy(self) -> "RegressionState":
        return RegressionState(
            H=self.H, d=self.d, lam=self.lam, delta=self.delta, B=self.B, k=self.k,
            sigma_hat=self.sigma_hat.copy(), b_hat=self.b_hat.copy(),
            sigma_tilde=self.sigma_tilde.copy(), b_tilde=self.b_tilde.copy(),
            theta_hat=self.theta_hat.copy(), theta_tilde=self.theta_tilde.copy(),
        )

    def radii(self) -> tuple[float, float, float]:
        return confidence_radii(self.k, self.lam, self.delta, self.d, self.H, self.B)

    def ellipsoids(self) -> list[ConfidenceEllipsoid]:
        beta_hat = self.radii()[0]
        return [ConfidenceEllipsoid(self.theta_hat[h].copy(), self.sigma_hat[h].copy(), beta_hat)
                for h in range(self.H)]


def _inv_norm(mat: np.ndarray, x: np.ndarray) -> float:
    sol = np.linalg.solve(mat, x)
    return math.sqrt(max(float(x @ sol), 0.0))


def bonus_term(state: RegressionState, phi0: np.ndarray, phi1: np.ndarray, k: int, h: int) -> float:
    H = state.H
    _, beta_bar, beta_tilde = confidence_radii(k, state.lam, state.delta, state.d, H, state.B)
    first = min(H**2, 2 * H * beta_bar * _inv_norm(state.sigma_hat[h], phi0))
    second = min(H**2, beta_tilde * _inv_norm(state.sigma_tilde[h], phi1))
    return first + second


def estimated_variance(theta_hat: np.ndarray, theta_tilde: np.ndarray, phi0: np.ndarray, phi1: np.ndarray,
                       H: int) -> float:
    """Clipped second moment minus clipped squared mean; may be negative."""
    second_moment = min(max(float(phi1 @ theta_tilde), 0.0), H**2)
    mean = min(max(float(phi0 @ theta_hat), 0.0), H)
    return second_moment - mean**2


def variance_upper_bound(state: RegressionState, phi0: np.ndarray, phi1: np.ndarray, k: int, h: int) -> float:
    H = state.H
    est_var = estimated_variance(state.theta_hat[h], state.theta_tilde[h], phi0, phi1, H)
    return max(H**2 / state.d, est_var + bonus_term(state, phi0, phi1, k, h))


@dataclass
class UpdateInfo:
    """Per-stage quantities recorded during one regression update."""

    sigma2: np.ndarray         # (H,)
    bonus: np.ndarray          # (H,)
    x_norm: np.ndarray         # ||phi0 / sigma||_2
    x_potential: np.ndarray    # ||phi0 / sigma||_{Sigma_hat^{-1}} before the update


def update_regression(state: RegressionState, trajectory: Trajectory, values: OptimisticValues,
                      phi: np.ndarray) -> tuple[RegressionState, UpdateInfo]:
    new = state.copy()
    H = state.H
    k = state.k
    info = UpdateInfo(np.empty(H), np.empty(H), np.empty(H), np.empty(H))
    for h in range(H):
        s, a, s_next = trajectory.states[h], trajectory.actions[h], trajectory.states[h + 1]
        v_next = values.V[h + 1]
        phi0 = phi[s, a].T @ v_next
        phi1 = phi[s, a].T @ (v_next**2)
        bonus = bonus_term(state, phi0, phi1, k, h)
        sigma2 = variance_upper_bound(state, phi0, phi1, k, h)
        w = 1.0 / sigma2
        x = phi0 * math.sqrt(w)
        info.sigma2[h] = sigma2
        info.bonus[h] = bonus
        info.x_norm[h] = float(np.linalg.norm(x))
        info.x_potential[h] = _inv_norm(state.sigma_hat[h], x)

        target = v_next[s_next]
        new.sigma_hat[h] += w * np.outer(phi0, phi0)
        new.b_hat[h] += w * phi0 * target
        new.sigma_tilde[h] += np.outer(phi1, phi1)
        new.b_tilde[h] += phi1 * target**2
        new.theta_hat[h] = cho_solve(cho_factor(new.sigma_hat[h]), new.b_hat[h])
        new.theta_tilde[h] = cho_solve(cho_factor(new.sigma_tilde[h]), new.b_tilde[h])
    new.k = k + 1
    return new, info
