"""Generalized least squares with an exchangeable working correlation.

Two entry points share one factorization routine:

* :func:`solve_gls` / :func:`iterated_gls` / :func:`sandwich_cov` work on
  arbitrary per-cluster blocks ``(X_i, y_i)``.  The exchangeable inverse is
  applied in closed form,

  .. math:: J^{-1} = \\frac{1}{1-\\rho}\\Big(I - \\frac{\\rho}{1+(n-1)\\rho} 11^T\\Big),

  so nothing n_i x n_i is ever formed.
* :func:`fit_grouped` works on cluster summaries (size, mean, within-cluster
  sum of squares) when every row of a cluster shares one design row.  Under
  that structure GLS collapses to weighted least squares on cluster means with
  weights ``n_i / (1 + (n_i - 1) rho)``.  The grouped solver is batched: it
  fits many weightings of the same clusters (bootstrap replicates) at once.

Variances are computed with sigma^2 = 1 inside the weights; the factor
cancels in the coefficients and in the sandwich, and the model-based
covariance is rescaled by the estimated sigma^2.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InsufficientDataError, SingularDesignError

RHO_MAX = 0.999
RANK_TOL = 1e-10
MAX_ITER = 10
TOL = 1e-8


class CorrKind(str, Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"


@dataclass(frozen=True)
class WorkingCorrelation:
    kind: CorrKind = CorrKind.INDEPENDENCE
    rho: float = 0.0

    def __post_init__(self):
        kind = CorrKind(self.kind)
        object.__setattr__(self, "kind", kind)
        rho = 0.0 if kind is CorrKind.INDEPENDENCE else float(np.clip(self.rho, 0.0, RHO_MAX))
        object.__setattr__(self, "rho", rho)

    @classmethod
    def exchangeable(cls, rho: float) -> "WorkingCorrelation":
        return cls(CorrKind.EXCHANGEABLE, rho)

    def matrix(self, n: int) -> np.ndarray:
        J = np.full((n, n), self.rho)
        np.fill_diagonal(J, 1.0)
        return J

    def inverse(self, n: int) -> np.ndarray:
        r = self.rho
        kappa = r / (1.0 + (n - 1) * r)
        return (np.eye(n) - kappa * np.ones((n, n))) / (1.0 - r)


INDEPENDENCE = WorkingCorrelation()


@dataclass(frozen=True)
class GlsFit:
    theta_hat: np.ndarray
    model_cov: np.ndarray
    sandwich_cov: np.ndarray
    sigma2_hat: float
    rho_hat: float
    n_clusters_used: int
    n_obs: int
    working: WorkingCorrelation
    n_iter: int = 1
    converged: bool = True
    icc_degenerate: bool = False

    @property
    def sandwich_se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sandwich_cov), 0.0, None))


class IccEstimate(NamedTuple):
    rho: float
    sigma2: float
    raw: float
    degenerate: bool


# ---------------------------------------------------------------------------
# Factorization
# ---------------------------------------------------------------------------

def batched_cholesky(A: np.ndarray, tol: float = RANK_TOL):
    """Cholesky factors of a stack of symmetric matrices.

    Returns ``(L, ok, bad_col)``.  A pivot at or below ``tol`` times the
    largest diagonal entry marks the matrix singular; ``bad_col`` is the
    first offending column (-1 when ``ok``).
    """
    A = np.asarray(A, dtype=float)
    nb, p, _ = A.shape
    L = np.zeros_like(A)
    ok = np.ones(nb, dtype=bool)
    bad = np.full(nb, -1)
    scale = np.max(np.diagonal(A, axis1=1, axis2=2), axis=1) if p else np.ones(nb)
    ok &= np.isfinite(scale) & (scale > 0)
    bad[~ok] = 0
    thresh = tol * np.where(ok, scale, 1.0)
    for j in range(p):
        d = A[:, j, j] - np.einsum("bk,bk->b", L[:, j, :j], L[:, j, :j])
        fail = ok & ~(d > thresh)
        bad[fail] = j
        ok &= ~fail
        d = np.where(ok, d, 1.0)
        L[:, j, j] = np.sqrt(d)
        if j + 1 < p:
            num = A[:, j + 1:, j] - np.einsum("bik,bk->bi", L[:, j + 1:, :j], L[:, j, :j])
            L[:, j + 1:, j] = num / L[:, j, j][:, None]
    return L, ok, bad


def batched_cho_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    nb, p, _ = L.shape
    z = np.zeros((nb, p))
    for j in range(p):
        z[:, j] = (b[:, j] - np.einsum("bk,bk->b", L[:, j, :j], z[:, :j])) / L[:, j, j]
    x = np.zeros((nb, p))
    for j in range(p - 1, -1, -1):
        x[:, j] = (z[:, j] - np.einsum("bk,bk->b", L[:, j + 1:, j], x[:, j + 1:])) / L[:, j, j]
    return x


def spd_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    L, ok, bad = batched_cholesky(A[None])
    if not ok[0]:
        raise SingularDesignError(f"design is rank deficient at column {bad[0]}", int(bad[0]))
    return batched_cho_solve(L, b[None])[0]


def spd_inverse(A: np.ndarray) -> np.ndarray:
    L, ok, bad = batched_cholesky(A[None])
    if not ok[0]:
        raise SingularDesignError(f"design is rank deficient at column {bad[0]}", int(bad[0]))
    p = A.shape[0]
    eye = np.eye(p)
    inv = np.stack([batched_cho_solve(L, eye[j][None])[0] for j in range(p)], axis=1)
    return 0.5 * (inv + inv.T)


# ---------------------------------------------------------------------------
# Block interface
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Blocks:
    """Stacked per-cluster blocks: rows of cluster i are ``offsets[i]:offsets[i+1]``."""

    X: np.ndarray
    y: np.ndarray
    sizes: np.ndarray

    @classmethod
    def from_pairs(cls, pairs) -> "Blocks":
        Xs, ys = [], []
        for blk in pairs:
            if len(blk) == 3 and not blk[2]:
                continue
            X, y = np.atleast_2d(np.asarray(blk[0], dtype=float)), np.asarray(blk[1], dtype=float)
            if X.shape[0] != y.size:
                raise ValueError("block X and y disagree in length")
            Xs.append(X)
            ys.append(y.reshape(-1))
        if not Xs:
            raise InsufficientDataError("no included clusters")
        sizes = np.array([y.size for y in ys])
        if np.any(sizes < 1):
            raise InsufficientDataError("empty cluster block")
        return cls(np.vstack(Xs), np.concatenate(ys), sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    def cluster_sums(self, v: np.ndarray) -> np.ndarray:
        return np.add.reduceat(v, self.offsets[:-1], axis=0)

    def split(self, v: np.ndarray) -> list[np.ndarray]:
        return np.split(v, self.offsets[1:-1])


def _as_blocks(blocks) -> Blocks:
    return blocks if isinstance(blocks, Blocks) else Blocks.from_pairs(blocks)


def _icc_from_sums(sum_e: np.ndarray, sum_e2: np.ndarray, n: np.ndarray, n_params: int) -> IccEstimate:
    dof = n.sum() - n_params
    sse = sum_e2.sum()
    sigma2 = sse / dof if dof > 0 else sse / max(n.sum(), 1)
    pairs = np.sum(n * (n - 1))
    if pairs <= 0 or sigma2 <= 0:
        return IccEstimate(0.0, float(sigma2), 0.0, True)
    raw = np.sum(sum_e ** 2 - sum_e2) / pairs / sigma2
    return IccEstimate(float(np.clip(raw, 0.0, RHO_MAX)), float(sigma2), float(raw), False)


def estimate_icc(residual_blocks: Sequence[np.ndarray], n_params: int = 0) -> IccEstimate:
    """Moment estimator of (rho, sigma^2) from per-cluster residual vectors.

    sigma^2 = sum e^2 / (sum n_i - p); rho is the averaged within-cluster
    cross product over sigma^2, clipped to [0, RHO_MAX].  All-singleton data
    gives rho = 0 with ``degenerate`` set.
    """
    res = [np.asarray(e, dtype=float).reshape(-1) for e in residual_blocks]
    n = np.array([e.size for e in res], dtype=float)
    s = np.array([e.sum() for e in res])
    s2 = np.array([e @ e for e in res])
    est = _icc_from_sums(s, s2, n, n_params)
    if est.degenerate:
        warnings.warn("ICC is not identifiable (no cluster with two or more residuals, "
                      "or zero residual variance); using rho = 0", RuntimeWarning, stacklevel=2)
    return est


def _normal_equations(blk: Blocks, rho: float):
    n = blk.sizes.astype(float)
    S = blk.cluster_sums(blk.X)
    s = blk.cluster_sums(blk.y)
    kappa = rho / (1.0 + (n - 1.0) * rho)
    c = 1.0 / (1.0 - rho)
    A = c * (blk.X.T @ blk.X - (S * kappa[:, None]).T @ S)
    b = c * (blk.X.T @ blk.y - S.T @ (kappa * s))
    return 0.5 * (A + A.T), b, S, kappa, c


def _block_sandwich(blk: Blocks, resid: np.ndarray, rho: float, A_inv: np.ndarray) -> np.ndarray:
    n = blk.sizes.astype(float)
    S = blk.cluster_sums(blk.X)
    kappa = rho / (1.0 + (n - 1.0) * rho)
    U = (blk.cluster_sums(blk.X * resid[:, None]) - S * (kappa * blk.cluster_sums(resid))[:, None])
    U /= 1.0 - rho
    V = A_inv @ (U.T @ U) @ A_inv
    return 0.5 * (V + V.T)


def solve_gls(blocks, wc: WorkingCorrelation = INDEPENDENCE) -> GlsFit:
    """Minimize sum_i (y_i - X_i theta)' J_i^{-1} (y_i - X_i theta) for fixed ``wc``."""
    blk = _as_blocks(blocks)
    p = blk.X.shape[1]
    if blk.y.size <= p:
        raise InsufficientDataError(f"{blk.y.size} observations for {p} parameters")
    A, b, *_ = _normal_equations(blk, wc.rho)
    theta = spd_solve(A, b)
    resid = blk.y - blk.X @ theta
    icc = _icc_from_sums(blk.cluster_sums(resid), blk.cluster_sums(resid ** 2),
                         blk.sizes.astype(float), p)
    A_inv = spd_inverse(A)
    return GlsFit(theta_hat=theta, model_cov=icc.sigma2 * A_inv,
                  sandwich_cov=_block_sandwich(blk, resid, wc.rho, A_inv),
                  sigma2_hat=icc.sigma2, rho_hat=icc.rho, n_clusters_used=len(blk.sizes),
                  n_obs=int(blk.y.size), working=wc, icc_degenerate=icc.degenerate)


def iterated_gls(blocks, max_iter: int = MAX_ITER, tol: float = TOL) -> GlsFit:
    """Alternate between fitting and re-estimating rho, starting from independence."""
    blk = _as_blocks(blocks)
    fit = solve_gls(blk, INDEPENDENCE)
    converged = False
    it = 1
    for it in range(2, max_iter + 2):
        new = solve_gls(blk, WorkingCorrelation.exchangeable(fit.rho_hat))
        delta = np.max(np.abs(new.theta_hat - fit.theta_hat))
        fit = new
        if delta < tol:
            converged = True
            break
    return GlsFit(**{**fit.__dict__, "n_iter": it, "converged": converged})


def sandwich_cov(blocks, fit: GlsFit) -> np.ndarray:
    blk = _as_blocks(blocks)
    A, *_ = _normal_equations(blk, fit.working.rho)
    resid = blk.y - blk.X @ fit.theta_hat
    return _block_sandwich(blk, resid, fit.working.rho, spd_inverse(A))


def gls_objective(blocks, theta: np.ndarray, wc: WorkingCorrelation) -> float:
    blk = _as_blocks(blocks)
    total = 0.0
    for i, e in enumerate(blk.split(blk.y - blk.X @ theta)):
        n = e.size
        kappa = wc.rho / (1.0 + (n - 1) * wc.rho)
        total += (e @ e - kappa * e.sum() ** 2) / (1.0 - wc.rho)
    return float(total)


# ---------------------------------------------------------------------------
# Grouped (cluster-summary) solver, batched over weightings
# ---------------------------------------------------------------------------

class GroupedFit(NamedTuple):
    theta: np.ndarray       # (B, p)
    rho_work: np.ndarray    # (B,) working rho of the final fit
    rho_hat: np.ndarray     # (B,) moment ICC of the final residuals
    sigma2: np.ndarray      # (B,)
    n_iter: np.ndarray      # (B,)
    ok: np.ndarray          # (B,) False when the design was singular
    bad_col: np.ndarray     # (B,)
    converged: np.ndarray   # (B,)


def _grouped_stats(X, n, ybar, wss, weight, theta, n_params):
    fitted = theta @ X.T
    d = ybar - fitted
    sse = wss + n * d * d
    se = n * d
    sigma_num = np.sum(weight * sse, axis=1)
    dof = np.sum(weight * n, axis=1) - n_params
    sigma2 = np.where(dof > 0, sigma_num / np.where(dof > 0, dof, 1.0), sigma_num)
    pairs = np.sum(weight * n * (n - 1.0), axis=1)
    cross = np.sum(weight * (se * se - sse), axis=1)
    good = (pairs > 0) & (sigma2 > 0)
    raw = np.where(good, cross / np.where(good, pairs * sigma2, 1.0), 0.0)
    return np.clip(raw, 0.0, RHO_MAX), sigma2


def _grouped_solve(XX, X, n, ybar, weight, rho):
    w = weight * n / (1.0 + (n - 1.0) * rho[:, None])
    p = X.shape[1]
    A = (w @ XX).reshape(-1, p, p)
    b = (w * ybar) @ X
    L, ok, bad = batched_cholesky(A)
    return batched_cho_solve(L, b), ok, bad


def _as2d(v, nb):
    v = np.asarray(v, dtype=float)
    return np.broadcast_to(v, (nb, v.shape[-1])) if v.ndim == 1 else v


def fit_grouped(X: np.ndarray, n, ybar, wss, weight, rho=None,
                max_iter: int = MAX_ITER, tol: float = TOL) -> GroupedFit:
    """Fit every weighting in a batch of cluster-summary problems.

    ``X`` is (U, p), one design row per unit; ``n``, ``ybar``, ``wss`` and
    ``weight`` are (U,) or (B, U).  ``weight`` multiplies each unit's
    contribution (bootstrap multiplicity times stage inclusion).  ``rho=None``
    runs the iterated estimator; otherwise ``rho`` is the fixed working ICC.
    Each batch entry follows its own iteration path, so its result does not
    depend on the other entries.
    """
    X = np.asarray(X, dtype=float)
    weight = np.asarray(weight, dtype=float)
    nb = 1 if weight.ndim == 1 else weight.shape[0]
    n, ybar, wss, weight = (_as2d(v, nb) for v in (n, ybar, wss, weight))
    p = X.shape[1]
    XX = (X[:, :, None] * X[:, None, :]).reshape(X.shape[0], p * p)

    if rho is not None:
        rho_w = np.broadcast_to(np.asarray(rho, dtype=float), (nb,)).copy()
        theta, ok, bad = _grouped_solve(XX, X, n, ybar, weight, rho_w)
        rho_hat, sigma2 = _grouped_stats(X, n, ybar, wss, weight, theta, p)
        one = np.ones(nb, dtype=int)
        return GroupedFit(theta, rho_w, rho_hat, sigma2, one, ok, bad, np.ones(nb, dtype=bool))

    rho_w = np.zeros(nb)
    theta, ok, bad = _grouped_solve(XX, X, n, ybar, weight, rho_w)
    n_iter = np.ones(nb, dtype=int)
    active = ok.copy()
    for _ in range(max_iter):
        if not active.any():
            break
        rho_new, _ = _grouped_stats(X, n, ybar, wss, weight, theta, p)
        theta_new, ok_new, bad_new = _grouped_solve(XX, X, n, ybar, weight, rho_new)
        failed = active & ~ok_new
        ok &= ~failed
        bad = np.where(failed, bad_new, bad)
        step = active & ok_new
        delta = np.max(np.abs(theta_new - theta), axis=1)
        theta = np.where(step[:, None], theta_new, theta)
        rho_w = np.where(step, rho_new, rho_w)
        n_iter += step
        active = step & ~(delta < tol)
    rho_hat, sigma2 = _grouped_stats(X, n, ybar, wss, weight, theta, p)
    return GroupedFit(theta, rho_w, rho_hat, sigma2, n_iter, ok, bad, ~active)


def grouped_gls_fit(X, n, ybar, wss, weight, fit: GroupedFit, index: int = 0) -> GlsFit:
    """Covariances for one entry of a grouped fit, packaged as :class:`GlsFit`."""
    X = np.asarray(X, dtype=float)
    nb = fit.theta.shape[0]
    n, ybar, wss, weight = (_as2d(v, nb)[index] for v in (n, ybar, wss, weight))
    theta, rho = fit.theta[index], float(fit.rho_work[index])
    if not fit.ok[index]:
        col = int(fit.bad_col[index])
        raise SingularDesignError(f"design is rank deficient at column {col}", col)
    denom = 1.0 + (n - 1.0) * rho
    w = weight * n / denom
    A = (X * w[:, None]).T @ X
    A_inv = spd_inverse(0.5 * (A + A.T))
    d = ybar - X @ theta
    U = X * (n * d / denom)[:, None]
    V = A_inv @ ((U * weight[:, None]).T @ U) @ A_inv
    sigma2 = float(fit.sigma2[index])
    used = weight > 0
    rho_hat = float(fit.rho_hat[index])
    return GlsFit(theta_hat=theta.copy(), model_cov=sigma2 * A_inv, sandwich_cov=0.5 * (V + V.T),
                  sigma2_hat=sigma2, rho_hat=rho_hat,
                  n_clusters_used=int(np.round(weight[used].sum())),
                  n_obs=int(np.round(np.sum(weight * n))),
                  working=(INDEPENDENCE if rho == 0 else WorkingCorrelation.exchangeable(rho)),
                  n_iter=int(fit.n_iter[index]), converged=bool(fit.converged[index]),
                  icc_degenerate=bool(np.sum(weight * n * (n - 1)) <= 0))
