"""Non-regularity diagnostics and bootstrap confidence intervals.

Four resampling schemes are provided:

``MN-CB``
    M-out-of-N cluster bootstrap; the resample size adapts to the estimated
    share of clusters whose next-stage treatment contrast is indistinguishable
    from zero.
``CB``
    Standard cluster bootstrap (M = N).
``mn-B``
    m-out-of-n bootstrap over individuals, ignoring clustering, with an
    independence working model.
``MN-CB-w``
    MN-CB with an independence working correlation.

Replicate ``b`` draws its indices from a generator seeded with
``(seed, b)``, so results do not depend on chunking or worker count, and the
first replicates are unchanged when ``B`` grows.  Replicates are fitted in
fixed-size chunks; the last chunk is padded so every chunk has the same
shape.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .data_model import ClusteredDataset, StageModelSpec
from .errors import ConfigError, InferenceFailureError, InsufficientDataError
from .qlearning import (CompiledData, Policy, StageFit, _compile, fit_backward,
                        fit_backward_grouped)

CHUNK = 100
LAMBDA_DEFAULT = 0.025


class Method(str, Enum):
    MN_CB = "MN-CB"
    CB = "CB"
    MN_B = "mn-B"
    MN_CB_W = "MN-CB-w"

    @classmethod
    def parse(cls, name: "str | Method") -> "Method":
        if isinstance(name, Method):
            return name
        key = str(name).strip().lower().replace("_", "-")
        for m in cls:
            if m.value.lower() == key:
                return m
        raise ConfigError(f"unknown method {name!r}; choose from {[m.value for m in cls]}")

    @property
    def clustered(self) -> bool:
        return self is not Method.MN_B

    @property
    def adaptive(self) -> bool:
        return self is not Method.CB

    @property
    def policy(self) -> str:
        return "independence" if self in (Method.MN_B, Method.MN_CB_W) else "iterated"


@dataclass(frozen=True)
class NonRegularityReport:
    t_stats: np.ndarray
    p_hat: float
    eta: float
    lam: float
    m_hat: int
    n_pool: int


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    method: Method
    stage: int
    labels: tuple[str, ...]
    groups: tuple[str, ...]
    point: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    alpha: float
    n_replicates_requested: int
    n_replicates_valid: int
    report: NonRegularityReport | None
    seed: int
    ci_form: str
    resample_size: int
    n_pool: int
    replicates: np.ndarray = field(repr=False)

    def _psi(self, v):
        return v[[g == "psi" for g in self.groups]]

    @property
    def psi_point(self) -> np.ndarray:
        return self._psi(self.point)

    @property
    def psi_lower(self) -> np.ndarray:
        return self._psi(self.ci_lower)

    @property
    def psi_upper(self) -> np.ndarray:
        return self._psi(self.ci_upper)

    def interval(self, label: str) -> tuple[float, float]:
        i = self.labels.index(label)
        return float(self.ci_lower[i]), float(self.ci_upper[i])


# ---------------------------------------------------------------------------
# Resample size
# ---------------------------------------------------------------------------

def resample_exponent(p, lam: float):
    """f(p) = (1 + lam (1 - p)) / (1 + lam)."""
    return (1.0 + lam * (1.0 - np.asarray(p, dtype=float))) / (1.0 + lam)


def resample_size(p_hat: float, lam: float, n_k: int) -> int:
    """round(n_k ** f(p_hat)), half up, clamped to [2, n_k]."""
    if not 0.0 <= p_hat <= 1.0:
        raise ConfigError(f"p_hat={p_hat} outside [0, 1]")
    if lam < 0:
        raise ConfigError(f"lambda={lam} is negative")
    if n_k < 2:
        raise ConfigError(f"n_k={n_k} < 2")
    m = math.floor(n_k ** float(resample_exponent(p_hat, lam)) + 0.5)
    return int(min(max(m, 2), n_k))


def default_eta(alpha: float, n_i_ref: float, n_next: int) -> float:
    """Bonferroni threshold t_{n_i - 1, 1 - alpha / (2 n_next)}."""
    return eta_from_order(1.0 - alpha / (2.0 * n_next), n_i_ref)


def eta_from_order(order: float, n_i_ref: float) -> float:
    if n_i_ref < 2:
        raise ConfigError("threshold needs a reference cluster size of at least 2")
    return float(stats.t.ppf(order, df=n_i_ref - 1))


def estimate_p(t_stats, eta: float) -> float:
    t = np.asarray(t_stats, dtype=float)
    if t.size == 0:
        raise ValueError("no T-statistics")
    return float(np.mean(np.abs(t) <= eta))


def contrast_t_stats(psi: np.ndarray, psi_cov: np.ndarray, H: np.ndarray) -> np.ndarray:
    num = H @ psi
    var = np.einsum("ij,jk,ik->i", H, psi_cov, H)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / np.sqrt(np.clip(var, 0.0, None))
    return np.where(var > 0, t, np.inf)


def cluster_t_stats(fit_next: StageFit, ds: ClusteredDataset | CompiledData) -> np.ndarray:
    """Per-cluster T-statistics of psi' h at stage ``fit_next.stage``.

    Only clusters randomized at that stage contribute.  A zero standard
    error yields +inf.
    """
    if isinstance(ds, CompiledData):
        st = ds.stage(fit_next.stage)
        H, inc = st.tailoring, st.included
    else:
        from .data_model import stage_rows
        r = stage_rows(ds, fit_next.spec)
        H, inc = r.tailoring, r.included
    return contrast_t_stats(fit_next.psi_hat, fit_next.psi_cov, H[inc])


# ---------------------------------------------------------------------------
# Intervals
# ---------------------------------------------------------------------------

def empirical_quantile(draws, q: float) -> float:
    """Linear-interpolation (type 7) sample quantile."""
    x = np.sort(np.asarray(draws, dtype=float).reshape(-1))
    if x.size == 0:
        raise ValueError("no draws")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile order {q} outside [0, 1]")
    h = (x.size - 1) * q
    lo = math.floor(h)
    hi = min(lo + 1, x.size - 1)
    return float(x[lo] + (h - lo) * (x[hi] - x[lo]))


def bootstrap_interval(point, draws, m: int, n: int, alpha: float, form: str = "hybrid"):
    """Interval from replicate estimates ``draws`` (B, p) of an m-out-of-n scheme.

    ``hybrid``: [est - u / sqrt(n), est - l / sqrt(n)] with (l, u) the
    alpha/2 and 1 - alpha/2 quantiles of sqrt(m) (draw - est).
    ``percentile``: [est + l / sqrt(n), est + u / sqrt(n)].
    """
    point = np.asarray(point, dtype=float)
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    scaled = math.sqrt(m) * (draws - point)
    lo = np.array([empirical_quantile(scaled[:, j], alpha / 2) for j in range(point.size)])
    hi = np.array([empirical_quantile(scaled[:, j], 1 - alpha / 2) for j in range(point.size)])
    rn = math.sqrt(n)
    if form == "hybrid":
        return point - hi / rn, point - lo / rn
    if form == "percentile":
        return point + lo / rn, point + hi / rn
    raise ConfigError(f"unknown interval form {form!r}")


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------

def replicate_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(b)]))


@dataclass(frozen=True, eq=False)
class _Job:
    data: CompiledData
    stage: int
    policy: Policy
    pool: np.ndarray        # resampled units: cluster indices, or individual indices
    size: int
    individual: bool
    seed: int
    chunk: int


def _chunk_weights(job: _Job, start: int, stop: int):
    d = job.data
    rows = []
    for b in range(start, stop):
        rows.append(job.pool[replicate_rng(job.seed, b).integers(0, job.pool.size, size=job.size)])
    rows += [rows[-1]] * (job.chunk - len(rows))
    idx = np.array(rows)
    nb = idx.shape[0]
    if not job.individual:
        flat = (idx + d.N * np.arange(nb)[:, None]).ravel()
        mult = np.bincount(flat, minlength=nb * d.N).reshape(nb, d.N).astype(float)
        return dict(mult=mult)
    unit = d.unit_of[idx]
    r = d.y[idx] - d.ybar[unit]
    flat = (unit + d.N * np.arange(nb)[:, None]).ravel()
    size = nb * d.N
    cnt = np.bincount(flat, minlength=size).reshape(nb, d.N).astype(float)
    s1 = np.bincount(flat, weights=r.ravel(), minlength=size).reshape(nb, d.N)
    s2 = np.bincount(flat, weights=(r * r).ravel(), minlength=size).reshape(nb, d.N)
    safe = np.where(cnt > 0, cnt, 1.0)
    ybar = d.ybar + s1 / safe
    wss = np.clip(s2 - s1 * s1 / safe, 0.0, None)
    return dict(mult=(cnt > 0).astype(float), n=cnt, ybar=ybar, wss=wss)


def _run_chunk(job: _Job, start: int, stop: int):
    kw = _chunk_weights(job, start, stop)
    bw = fit_backward_grouped(job.data, job.policy, stop_stage=job.stage, **kw)
    m = stop - start
    return bw.fits[job.stage].theta[:m], bw.ok[:m]


def _run_chunk_args(args):
    return _run_chunk(*args)


def run_bootstrap(ds: ClusteredDataset | CompiledData, specs: Sequence[StageModelSpec] | None = None,
                  method: str | Method = Method.MN_CB, B: int = 1000, alpha: float = 0.05,
                  lam: float = LAMBDA_DEFAULT, eta: float | str = "auto", seed: int = 0,
                  stage: int = 1, ci_form: str = "hybrid", refit_rho: bool = True,
                  n_jobs: int = 1, progress: Callable[[int, int], None] | None = None,
                  chunk: int = CHUNK) -> BootstrapResult:
    """Bootstrap confidence intervals for every stage-``stage`` coefficient.

    ``eta`` is ``"auto"`` (Bonferroni threshold with the median cluster size)
    or a number.  With ``refit_rho=False`` each replicate reuses the original
    working ICC of every stage instead of re-estimating it.
    """
    method = Method.parse(method)
    if B < 100:
        raise ConfigError(f"B={B}: at least 100 bootstrap replicates are required")
    if not 0.0 < alpha < 0.5:
        raise ConfigError(f"alpha={alpha} outside (0, 0.5)")
    if lam < 0:
        raise ConfigError(f"lambda={lam} is negative")
    if lam > 0.10:
        warnings.warn(f"lambda={lam} is outside the usual range [0, 0.10]", stacklevel=2)
    if ci_form not in ("hybrid", "percentile"):
        raise ConfigError(f"unknown interval form {ci_form!r}")

    data = _compile(ds, specs)
    if not 1 <= stage <= data.K:
        raise ConfigError(f"stage {stage} outside 1..{data.K}")
    base = data.individuals() if method is Method.MN_B else data
    original = fit_backward(base, wc_policy=method.policy, stop_stage=stage)
    fit_k = original.stage_fits[stage]
    inc = base.stage(stage).included
    pool_units = np.flatnonzero(inc)
    n_pool = int(pool_units.size)
    if n_pool < 2:
        raise InsufficientDataError(f"stage {stage}: fewer than two units to resample")

    report = None
    if method.adaptive:
        if stage < data.K:
            fit_next = original.stage_fits[stage + 1]
            t = cluster_t_stats(fit_next, base)
            if eta == "auto":
                eta_v = default_eta(alpha, float(np.median(data.n)), t.size)
            else:
                eta_v = float(eta)
            p_hat = estimate_p(t, eta_v)
        else:
            t, p_hat = np.zeros(0), 0.0
            eta_v = math.nan if eta == "auto" else float(eta)
        m_hat = resample_size(p_hat, lam, n_pool)
        report = NonRegularityReport(t, p_hat, eta_v, lam, m_hat, n_pool)
    else:
        m_hat = n_pool

    policy: Policy = method.policy
    if not refit_rho and method.policy == "iterated":
        policy = {k: f.gls.working.rho for k, f in original.stage_fits.items()}

    if method is Method.MN_B:
        job = _Job(data, stage, policy, np.flatnonzero(data.stage(stage).included[data.unit_of]),
                   m_hat, True, seed, chunk)
    else:
        job = _Job(data, stage, policy, pool_units, m_hat, False, seed, chunk)

    spans = [(s, min(s + chunk, B)) for s in range(0, B, chunk)]
    thetas, oks = [], []
    if n_jobs > 1 and len(spans) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            for done, (th, ok) in enumerate(ex.map(_run_chunk_args, [(job, s, e) for s, e in spans])):
                thetas.append(th)
                oks.append(ok)
                if progress:
                    progress(spans[done][1], B)
    else:
        for s, e in spans:
            th, ok = _run_chunk(job, s, e)
            thetas.append(th)
            oks.append(ok)
            if progress:
                progress(e, B)
    reps = np.vstack(thetas)
    valid = np.concatenate(oks)
    reps[~valid] = np.nan
    n_valid = int(valid.sum())
    if B - n_valid > B / 2:
        raise InferenceFailureError(f"{B - n_valid} of {B} bootstrap replicates failed")
    point = fit_k.theta_hat
    lo, hi = bootstrap_interval(point, reps[valid], m_hat, n_pool, alpha, ci_form)
    return BootstrapResult(method, stage, fit_k.labels, fit_k.spec.groups(), point.copy(), lo, hi,
                           alpha, B, n_valid, report, int(seed), ci_form, m_hat, n_pool, reps)


def write_replicates_csv(result: BootstrapResult, path) -> None:
    """Per-replicate coefficient table (blank cells for failed replicates)."""
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["replicate", "valid", *result.labels])
        for b, row in enumerate(result.replicates):
            ok = bool(np.all(np.isfinite(row)))
            w.writerow([b, int(ok), *[repr(float(v)) if ok else "" for v in row]])
