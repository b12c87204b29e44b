"""One mirror-descent step over occupancy measures and its KL projection.

The decision set is the intersection of

* the flow polytope (stage-1 outflow pinned to the initial state, outflow equals
  inflow afterwards) together with the entry box ``[alpha, 1]``, and
* for every (h, s, a) the cone of rows ``m * Phi(s, a) theta`` with ``theta`` in the
  stage-h confidence ellipsoid.

The first set is projected exactly by a semismooth Newton method on its dual. The
second splits into independent row problems (an I-projection onto the ellipsoid
image, solved in parameter space). Bregman-Dykstra with multiplicative corrections
alternates between them; when the flow/box projection already satisfies every row
constraint it is the answer and Dykstra is skipped.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq, linprog

from .occupancy import ConstraintReport, bregman_kl, free_mask, induced_transition, validate
from .vtr import ConfidenceEllipsoid

log = logging.getLogger(__name__)


class ProjectionError(RuntimeError):
    def __init__(self, message: str, report: ConstraintReport | None = None):
        super().__init__(message)
        self.report = report


@dataclass
class ProjectionConfig:
    tol: float = 1e-7
    max_outer_iters: int = 500
    inner_solver_tol: float = 1e-10

    def __post_init__(self):
        if self.tol <= 0 or self.max_outer_iters < 1:
            raise ValueError("need tol > 0 and max_outer_iters >= 1")


@dataclass
class ProjectionStats:
    outer_iters: int
    newton_iters: int
    report: ConstraintReport
    mu: np.ndarray = field(repr=False)


# --- flow polytope with box -------------------------------------------------------

@lru_cache(maxsize=64)
def _flow_system(H: int, S: int, A: int, s1: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Constraint matrix over free entries, right-hand side and the free mask."""
    mask = free_mask((H, S, A, S), s1)
    n_con = 1 + (H - 1) * S
    coef = np.zeros((n_con, H, S, A, S))
    coef[0, 0, s1] = 1.0
    for h in range(1, H):
        for s in range(S):
            row = 1 + (h - 1) * S + s
            coef[row, h, s] = 1.0
            coef[row, h - 1, :, :, s] -= 1.0
    Amat = coef.reshape(n_con, -1)[:, mask.ravel()]
    b = np.zeros(n_con)
    b[0] = 1.0
    Amat.setflags(write=False)
    return Amat, b, mask


def _flow_box_project(logz: np.ndarray, Amat: np.ndarray, b: np.ndarray, lo: float, hi: float,
                      tol: float, mu0: np.ndarray | None = None, max_iter: int = 200):
    """argmin_x D(x||z) s.t. Ax = b, lo <= x <= hi. Returns (x, mu, iterations)."""
    mu = np.zeros(len(b)) if mu0 is None else mu0.copy()
    log_lo = math.log(lo) if lo > 0 else -np.inf
    log_hi = math.log(hi)
    z = np.exp(logz)

    def primal(mu):
        lx = np.clip(logz - Amat.T @ mu, log_lo, log_hi)
        return lx, np.exp(lx)

    def dual(mu, lx, x):
        t = Amat.T @ mu
        return float(np.sum(x * (lx - logz) - x + z + t * x) - mu @ b)

    lx, x = primal(mu)
    g_val = dual(mu, lx, x)
    for it in range(1, max_iter + 1):
        resid = Amat @ x - b
        if np.max(np.abs(resid)) <= tol:
            return x, mu, it - 1
        free = (lx > log_lo) & (lx < log_hi)
        # clipped entries get a sliver of curvature so a fully clipped constraint
        # still yields a bounded step
        w = x * np.where(free, 1.0, 1e-6)
        hess = (Amat * w) @ Amat.T
        hess[np.diag_indices_from(hess)] += 1e-15 + 1e-14 * np.trace(hess) / len(b)
        step = np.linalg.solve(hess, resid)
        slope = float(resid @ step)
        res_norm = np.linalg.norm(resid)
        s = 1.0
        while True:
            mu_new = mu + s * step
            lx_new, x_new = primal(mu_new)
            g_new = dual(mu_new, lx_new, x_new)
            # near the optimum the dual value is flat to rounding, so a residual
            # decrease is accepted as well
            flat = abs(g_new - g_val) <= 1e-13 * (1.0 + abs(g_val))
            if (g_new >= g_val + 1e-4 * s * slope
                    or (flat and np.linalg.norm(Amat @ x_new - b) <= (1 - 1e-4 * s) * res_norm)
                    or s < 1e-12):
                break
            s *= 0.5
        mu, lx, x, g_val = mu_new, lx_new, x_new, g_new
    resid = Amat @ x - b
    if np.max(np.abs(resid)) > 10 * tol:
        exc = ProjectionError(f"flow projection did not converge (residual {np.max(np.abs(resid)):.3g})")
        exc.x = x
        raise exc
    return x, mu, max_iter


# --- row constraints ----------------------------------------------------------------

def _trs_distance(M_u: np.ndarray, M_s: np.ndarray, c: np.ndarray) -> np.ndarray:
    """min_{||u|| <= 1} ||M u - c|| for a batch; ``M = U diag(s) V^T`` given as (U, s).

    ``M_u``: (n, m, r), ``M_s``: (n, r), ``c``: (n, m).
    """
    g = np.einsum("nmr,nm->nr", M_u, c)
    outside = np.maximum(np.einsum("nm,nm->n", c, c) - np.einsum("nr,nr->n", g, g), 0.0)
    pos = M_s > 0
    safe_s = np.where(pos, M_s, 1.0)
    u_free = np.where(pos, g / safe_s, 0.0)
    inner = np.where(pos, 0.0, g)
    norm_free = np.linalg.norm(u_free, axis=1)
    dist2 = outside + np.einsum("nr,nr->n", inner, inner)
    need = norm_free > 1.0
    if np.any(need):
        gs, ss = g[need], np.where(pos[need], M_s[need], 0.0)
        lo = np.zeros(len(gs))
        hi = np.linalg.norm(ss * gs, axis=1)
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            u = ss * gs / (ss**2 + mid[:, None])
            big = np.linalg.norm(u, axis=1) > 1.0
            lo = np.where(big, mid, lo)
            hi = np.where(big, hi, mid)
        nu = hi[:, None]
        resid = np.where(ss > 0, nu * gs / (ss**2 + nu), gs)
        dist2[need] = outside[need] + np.einsum("nr,nr->n", resid, resid)
    return np.sqrt(dist2)


@dataclass
class ClippedConstraintSet:
    """Clipped occupancy polytope for one episode.

    ``ellipsoids`` is one :class:`ConfidenceEllipsoid` per stage, or ``None`` for the
    flow constraints alone.
    """

    alpha: float
    s1: int
    phi: np.ndarray
    ellipsoids: list[ConfidenceEllipsoid] | None = None
    H: int | None = None
    _svd: tuple | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.H is None:
            if self.ellipsoids is None:
                raise ValueError("H is required when no ellipsoids are given")
            self.H = len(self.ellipsoids)
        S, A = self.phi.shape[:2]
        if not 0 < self.alpha <= 1.0 / (S * S * A):
            raise ValueError(f"alpha must lie in (0, 1/(S^2 A)], got {self.alpha}")
        if self.ellipsoids is not None and any(e.radius <= 0 for e in self.ellipsoids):
            raise ValueError("confidence radii must be positive")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        S, A = self.phi.shape[:2]
        return (self.H, S, A, S)

    def _image(self):
        """Per-(h, s, a) SVD of ``beta * Phi(s, a) L_h^{-T}`` and the image center."""
        if self._svd is None:
            H, S, A, _ = self.shape
            d = self.phi.shape[-1]
            Ms = np.empty((H, S, A, S, d))
            centers = np.empty((H, S, A, S))
            for h, ell in enumerate(self.ellipsoids):
                L = ell.lower()
                # Phi L^{-T}: solve L X^T = Phi^T
                sol = np.linalg.solve(L, self.phi.reshape(-1, d).T).T
                Ms[h] = ell.radius * sol.reshape(S, A, S, d)
                centers[h] = self.phi @ ell.center
            U, s, _ = np.linalg.svd(Ms, full_matrices=False)
            s = np.where(s > 1e-13 * max(s.max(), 1e-300), s, 0.0)
            self._svd = (U, s, centers)
        return self._svd

    def row_distances(self, cond: np.ndarray) -> np.ndarray:
        """l2 distance of each conditional row ``cond[h, s, a]`` to the ellipsoid image."""
        if self.ellipsoids is None:
            return np.zeros(cond.shape[:3])
        U, s, centers = self._image()
        n = int(np.prod(cond.shape[:3]))
        S = cond.shape[-1]
        c = (cond - centers).reshape(n, S)
        dist = _trs_distance(U.reshape(n, S, -1), s.reshape(n, -1), c)
        return dist.reshape(cond.shape[:3])


def _closest_preimage(theta, Phi, center, sigma):
    """Among parameters with the same image ``Phi theta``, the one closest to center."""
    diff = theta - center
    sig_inv_phi_t = np.linalg.solve(sigma, Phi.T)
    gram = Phi @ sig_inv_phi_t
    w = np.linalg.pinv(gram, rcond=1e-12) @ (Phi @ diff)
    return center + sig_inv_phi_t @ w


def _feasible_start(Phi, yhat, center):
    cands = [np.linalg.lstsq(Phi, yhat, rcond=None)[0], center,
             np.linalg.lstsq(Phi, np.full(len(yhat), 1.0 / len(yhat)), rcond=None)[0]]
    for theta in cands:
        p = Phi @ theta
        tot = p.sum()
        if tot > 0 and np.all(p / tot > 1e-12):
            return theta / tot
    d = Phi.shape[1]
    S = Phi.shape[0]
    # maximize tau s.t. Phi theta >= tau, 1^T Phi theta = 1
    cost = np.zeros(d + 1)
    cost[-1] = -1.0
    A_ub = np.hstack([-Phi, np.ones((S, 1))])
    A_eq = np.append(Phi.sum(axis=0), 0.0)[None]
    res = linprog(cost, A_ub=A_ub, b_ub=np.zeros(S), A_eq=A_eq, b_eq=[1.0],
                  bounds=[(None, None)] * d + [(None, 1.0)])
    if not res.success or res.x[-1] <= 0:
        raise ProjectionError("no strictly positive distribution in the span of the features")
    return res.x[:d]


def _entropy_newton(theta, Phi, logy, center, sigma, rho, tol, max_iter=100):
    """argmin sum p log(p / y) + rho/2 ||theta - center||_sigma^2 s.t. 1^T Phi theta = 1."""
    gvec = Phi.sum(axis=0)
    d = len(theta)

    def objective(th):
        p = Phi @ th
        if np.any(p <= 0):
            return np.inf
        diff = th - center
        return float(p @ (np.log(p) - logy)) + 0.5 * rho * float(diff @ sigma @ diff)

    f = objective(theta)
    kkt = np.zeros((d + 1, d + 1))
    kkt[:d, d] = gvec
    kkt[d, :d] = gvec
    rhs = np.zeros(d + 1)
    it = 0
    for it in range(1, max_iter + 1):
        p = Phi @ theta
        grad = Phi.T @ (np.log(p) - logy + 1.0) + rho * (sigma @ (theta - center))
        kkt[:d, :d] = (Phi.T / p) @ Phi + rho * sigma
        rhs[:d] = -grad
        rhs[d] = 1.0 - gvec @ theta
        sol = np.linalg.lstsq(kkt, rhs, rcond=1e-14)[0]
        step = sol[:d]
        decrement = -float(grad @ step)
        if decrement < 2 * tol:
            break
        s = 1.0
        while s > 1e-14:
            f_new = objective(theta + s * step)
            if f_new <= f - 0.25 * s * decrement:
                break
            s *= 0.5
        theta = theta + s * step
        f = f_new
    return theta, it


def row_iprojection(Phi: np.ndarray, yhat: np.ndarray, ell: ConfidenceEllipsoid,
                    tol: float = 1e-14) -> tuple[np.ndarray, int]:
    """argmin KL(p || yhat) over p = Phi theta, theta in ``ell``, p a distribution."""
    center, sigma, beta = ell.center, ell.shape, ell.radius
    logy = np.log(yhat)
    theta = _feasible_start(Phi, yhat, center)
    theta, iters = _entropy_newton(theta, Phi, logy, center, sigma, 0.0, tol)
    theta = _closest_preimage(theta, Phi, center, sigma)
    if ell.mahalanobis(theta) <= beta:
        return Phi @ theta, iters

    cache = {"theta": theta, "iters": iters}

    def gap(rho):
        th, n = _entropy_newton(cache["theta"], Phi, logy, center, sigma, rho, tol)
        cache["theta"] = th
        cache["iters"] += n
        return 1.0 / beta - 1.0 / max(ell.mahalanobis(th), 1e-300)

    rho_hi = 1.0
    while gap(rho_hi) > 0:
        rho_hi *= 10.0
        if rho_hi > 1e16:
            raise ProjectionError("confidence ellipsoid contains no transition row")
    try:
        rho = brentq(gap, 0.0, rho_hi, xtol=1e-15, rtol=1e-12, maxiter=300)
    except RuntimeError:
        # gap() is only as smooth as the inner solve; fall back to plain bisection
        lo, hi = 0.0, rho_hi
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if gap(mid) > 0:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-12 * hi:
                break
        rho = hi
    for _ in range(60):
        if gap(rho) <= 0:
            break
        rho *= 1 + 1e-9
    theta = cache["theta"]
    p = Phi @ theta
    return p / p.sum(), cache["iters"]


def _cone_project(logz: np.ndarray, cset: ClippedConstraintSet, rows: np.ndarray) -> tuple[np.ndarray, int]:
    """KL projection of each listed (h, s, a) row of ``logz`` onto its transition cone."""
    out = logz.copy()
    total_iters = 0
    for h, s, a in rows:
        lz = logz[h, s, a]
        shift = lz.max()
        y = np.exp(lz - shift)
        Y = y.sum()
        yhat = y / Y
        p, n = row_iprojection(cset.phi[s, a], yhat, cset.ellipsoids[h])
        total_iters += n
        p = np.maximum(p, 1e-300)
        c = float(p @ (np.log(p) - np.log(yhat)))
        out[h, s, a] = np.log(p) + math.log(Y) + shift - c
    return out, total_iters


# --- public API ---------------------------------------------------------------------

def multiplicative_step(q_prev: np.ndarray, r: np.ndarray, eta: float) -> np.ndarray:
    if eta < 0:
        raise ValueError("step size must be nonnegative")
    return q_prev * np.exp(eta * r)[..., None]


def project_kl(q_bar: np.ndarray, cset: ClippedConstraintSet, cfg: ProjectionConfig | None = None,
               mu0: np.ndarray | None = None) -> tuple[np.ndarray, ProjectionStats]:
    """KL projection of a positive array onto the clipped constraint set."""
    cfg = cfg or ProjectionConfig()
    H, S, A, _ = cset.shape
    if q_bar.shape != cset.shape:
        raise ValueError(f"q_bar shape {q_bar.shape} does not match constraint set {cset.shape}")
    Amat, b, mask = _flow_system(H, S, A, cset.s1)
    vals = q_bar[mask]
    if np.any(vals <= 0):
        raise ValueError("q_bar must be positive on the free entries")
    flow_tol = min(cfg.inner_solver_tol, 0.1 * cfg.tol)

    def embed(x):
        out = np.zeros(cset.shape)
        out[mask] = x
        return out

    def flow(logz, mu):
        try:
            return _flow_box_project(logz, Amat, b, cset.alpha, 1.0, flow_tol, mu)
        except ProjectionError as exc:
            report = validate(embed(exc.x), cset.s1, cset if cset.ellipsoids is not None else None)
            raise ProjectionError(str(exc), report) from exc

    log_y = np.log(vals)
    x, mu, newton = flow(log_y, mu0)
    q = embed(x)
    if cset.ellipsoids is None:
        return q, ProjectionStats(0, newton, validate(q, cset.s1, None), mu)

    dist = cset.row_distances(induced_transition(q))
    if dist.max() <= cfg.tol:
        return q, ProjectionStats(0, newton, validate(q, cset.s1, cset), mu)

    # Bregman-Dykstra: corrections live in log space; forced-zero rows carry a dummy 0
    rows_free = free_mask(cset.shape, cset.s1)[..., 0]
    row_ids = np.argwhere(rows_free)
    corr_flow = np.zeros_like(log_y)
    corr_cone = np.zeros(cset.shape)
    log_x = np.log(x)
    prev = x
    for outer in range(1, cfg.max_outer_iters + 1):
        lz_full = np.zeros(cset.shape)
        lz_full[mask] = log_x
        lz_full += corr_cone
        cond = induced_transition(np.exp(lz_full - lz_full.max(axis=-1, keepdims=True)))
        bad = (cset.row_distances(cond) > 1e-13) & rows_free
        rows = [tuple(r) for r in row_ids if bad[tuple(r)]]
        try:
            proj_full, n_iter = _cone_project(lz_full, cset, rows)
        except ProjectionError as exc:
            raise ProjectionError(str(exc), validate(embed(x), cset.s1, cset)) from exc
        newton += n_iter
        corr_cone = lz_full - proj_full
        lz = proj_full[mask] + corr_flow
        x, mu, n_iter = flow(lz, mu)
        newton += n_iter
        log_x = np.log(x)
        corr_flow = lz - log_x
        q = embed(x)
        c2 = float(cset.row_distances(induced_transition(q))[rows_free].max())
        moved = float(np.abs(x - prev).sum())
        prev = x
        log.debug("dykstra sweep %d: c2 %.3g moved %.3g", outer, c2, moved)
        if c2 <= cfg.tol and moved <= cfg.tol:
            return q, ProjectionStats(outer, newton, validate(q, cset.s1, cset), mu)
    report = validate(q, cset.s1, cset)
    if report.max_c2_violation <= 10 * cfg.tol and report.max_flow_violation <= 10 * cfg.tol:
        log.info("projection stopped at max_outer_iters with c2 violation %.3g", report.max_c2_violation)
        return q, ProjectionStats(cfg.max_outer_iters, newton, report, mu)
    raise ProjectionError(
        f"projection infeasible after {cfg.max_outer_iters} sweeps "
        f"(flow {report.max_flow_violation:.3g}, c2 {report.max_c2_violation:.3g})", report)


def base_update(q_prev: np.ndarray, r: np.ndarray, eta: float, cset: ClippedConstraintSet,
                cfg: ProjectionConfig | None = None, mu0: np.ndarray | None = None):
    return project_kl(multiplicative_step(q_prev, r, eta), cset, cfg, mu0)


def projection_objective(q: np.ndarray, q_bar: np.ndarray) -> float:
    return bregman_kl(q, q_bar)
