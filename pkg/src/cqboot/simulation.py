"""Two-stage clustered SMART generator, truth oracle and Monte Carlo runner.

Generative model (all treatments and covariates coded -1/+1, cluster level)::

    X1, A1 ~ uniform{-1, +1}
    Pr(X2 = 1 | X1, A1) = logistic(d0 + d1 X1 + d2 A1)
    A2 ~ uniform{-1, +1}
    Y_ij = g0 + g1 X1 + g2 A1 + g3 X1 A1 + g4 X2 + g5 A2 + g6 X2 A2 + g7 A1 A2
           + alpha_i + eps_ij

with alpha_i ~ N(0, rho s2) and eps_ij ~ N(0, (1 - rho) s2).  The stage-2
contrast is g5 + g6 X2 + g7 A1; cells where it vanishes are the
non-regular ones.
"""

from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fnmatch import fnmatchcase
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .bootstrap import LAMBDA_DEFAULT, Method, eta_from_order, run_bootstrap
from .data_model import ClusteredDataset, ClusterRecord, StageModelSpec
from .errors import CQError, ConfigError, ExperimentError
from .qlearning import CompiledData, fit_backward

SIM_SPECS = (
    StageModelSpec(1, main_effects=(), tailoring=("x1",)),
    StageModelSpec(2, main_effects=("x1", "a1", "x1*a1"), tailoring=("x2",)),
)
# needed only when the stage-2 contrast depends on A1 (g7 != 0)
SIM_SPECS_A1 = (
    SIM_SPECS[0],
    StageModelSpec(2, main_effects=("x1", "x1*a1"), tailoring=("x2", "a1")),
)
PSI11 = "a1:x1"
ZERO_TOL = 1e-12


@dataclass(frozen=True)
class GenerativeConfig:
    n_clusters: int
    cluster_size: int | tuple[int, int]
    rho: float
    gamma: tuple[float, ...]
    delta: tuple[float, float, float] = (0.0, 0.4, 0.4)
    sigma2_total: float = 1.0
    seed: int = 0

    def __post_init__(self):
        size = self.cluster_size
        if isinstance(size, (list, tuple)):
            lo, hi = (int(v) for v in size)
            size = (lo, hi)
        else:
            lo = hi = int(size)
            size = lo
        object.__setattr__(self, "cluster_size", size)
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        object.__setattr__(self, "delta", tuple(float(d) for d in self.delta))
        if self.n_clusters < 2:
            raise ConfigError(f"n_clusters={self.n_clusters} < 2")
        if lo < 1 or hi < lo:
            raise ConfigError(f"invalid cluster size law {self.cluster_size!r}")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho={self.rho} outside [0, 1)")
        if len(self.gamma) != 8:
            raise ConfigError(f"gamma needs 8 entries, got {len(self.gamma)}")
        if len(self.delta) != 3:
            raise ConfigError(f"delta needs 3 entries, got {len(self.delta)}")
        if not self.sigma2_total > 0:
            raise ConfigError(f"sigma2_total={self.sigma2_total} must be positive")

    @property
    def size_range(self) -> tuple[int, int]:
        s = self.cluster_size
        return s if isinstance(s, tuple) else (s, s)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cluster_size"] = list(self.cluster_size) if isinstance(self.cluster_size, tuple) \
            else self.cluster_size
        d["gamma"], d["delta"] = list(self.gamma), list(self.delta)
        return d

    @classmethod
    def from_dict(cls, doc: Mapping) -> "GenerativeConfig":
        known = {"n_clusters", "cluster_size", "rho", "gamma", "delta", "sigma2_total", "seed"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown generative config keys {sorted(extra)}")
        try:
            return cls(**dict(doc))
        except TypeError as e:
            raise ConfigError(f"invalid generative config: {e}") from None


def sim_specs(cfg: "GenerativeConfig") -> tuple[StageModelSpec, ...]:
    """Smallest correctly specified working models for ``cfg``."""
    return SIM_SPECS_A1 if cfg.gamma[7] != 0 else SIM_SPECS


def _draw(cfg: GenerativeConfig, rng: np.random.Generator):
    N = cfg.n_clusters
    lo, hi = cfg.size_range
    sizes = rng.integers(lo, hi + 1, size=N)
    x1 = rng.choice([-1.0, 1.0], size=N)
    a1 = rng.choice([-1.0, 1.0], size=N)
    d0, d1, d2 = cfg.delta
    x2 = np.where(rng.random(N) < expit(d0 + d1 * x1 + d2 * a1), 1.0, -1.0)
    a2 = rng.choice([-1.0, 1.0], size=N)
    g = cfg.gamma
    mean = (g[0] + g[1] * x1 + g[2] * a1 + g[3] * x1 * a1 + g[4] * x2
            + g[5] * a2 + g[6] * x2 * a2 + g[7] * a1 * a2)
    alpha = rng.normal(0.0, math.sqrt(cfg.rho * cfg.sigma2_total), size=N)
    eps = rng.normal(0.0, math.sqrt((1.0 - cfg.rho) * cfg.sigma2_total), size=int(sizes.sum()))
    y = np.repeat(mean + alpha, sizes) + eps
    return sizes, x1, a1, x2, a2, y


def generate(cfg: GenerativeConfig, rng: np.random.Generator | None = None) -> ClusteredDataset:
    """One simulated trial; every cluster is randomized at both stages."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    sizes, x1, a1, x2, a2, y = _draw(cfg, rng)
    width = len(str(cfg.n_clusters))
    parts = np.split(y, np.cumsum(sizes)[:-1])
    clusters = [ClusterRecord(f"c{i + 1:0{width}d}", {"x1": x1[i], "x2": x2[i]},
                              (int(a1[i]), int(a2[i])), parts[i])
                for i in range(cfg.n_clusters)]
    return ClusteredDataset(tuple(clusters), 2)


# ---------------------------------------------------------------------------
# Truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TruthReport:
    psi10: float
    psi11: float
    projection: dict[str, float]     # coefficients on 1, x1, a1, a1:x1
    p: float
    effect_size: float

    def to_dict(self) -> dict:
        return asdict(self)


def stage2_contrast(gamma, x2, a1):
    return gamma[5] + gamma[6] * x2 + gamma[7] * a1


def true_stage1_params(cfg: GenerativeConfig) -> TruthReport:
    """Exact stage-1 projection, enumerating the eight (X1, A1, X2) cells."""
    g = cfg.gamma
    d0, d1, d2 = cfg.delta
    m = {}
    p = 0.0
    for x1, a1 in itertools.product((1, -1), repeat=2):
        q = float(expit(d0 + d1 * x1 + d2 * a1))
        base = g[0] + g[1] * x1 + g[2] * a1 + g[3] * x1 * a1 + g[4] * (2 * q - 1)
        add = q * abs(stage2_contrast(g, 1, a1)) + (1 - q) * abs(stage2_contrast(g, -1, a1))
        m[x1, a1] = base + add
        p += 0.25 * (q * (abs(stage2_contrast(g, 1, a1)) < ZERO_TOL)
                     + (1 - q) * (abs(stage2_contrast(g, -1, a1)) < ZERO_TOL))
    proj = {
        "(Intercept)": (m[1, 1] + m[-1, 1] + m[1, -1] + m[-1, -1]) / 4,
        "x1": (m[1, 1] - m[-1, 1] + m[1, -1] - m[-1, -1]) / 4,
        "a1": (m[1, 1] + m[-1, 1] - m[1, -1] - m[-1, -1]) / 4,
        PSI11: (m[1, 1] - m[-1, 1] - m[1, -1] + m[-1, -1]) / 4,
    }
    es = 2.0 * abs(proj[PSI11]) / math.sqrt(cfg.sigma2_total)
    return TruthReport(proj["a1"], proj[PSI11], proj, float(p), es)


def solve_gamma3(cfg: GenerativeConfig, effect_size: float) -> float:
    """g3 giving 2 psi11 / sigma = effect_size (psi11 is g3 plus a constant)."""
    g = list(cfg.gamma)
    g[3] = 0.0
    offset = true_stage1_params(replace(cfg, gamma=tuple(g))).psi11
    return effect_size * math.sqrt(cfg.sigma2_total) / 2.0 - offset


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

SCENARIOS = {"S1": (80, 20), "S2": (20, 80), "S3": (30, (10, 30))}
RHOS = {"rho05": 0.05, "rho10": 0.10, "rho20": 0.20}
EFFECTS = (0.2, 0.5, 0.8)
_STAGE2 = {"regular": (0.5, 0.25, 0.0), "nonregular": (0.0, 0.0, 0.0), "near": (0.1, 0.0, 0.0)}
_BASE = (0.0, 0.2, 0.1, 0.0, 0.1)


def _example(ex: int) -> tuple[str, float]:
    kind = ("regular", "nonregular", "near")[(ex - 1) // 3]
    return kind, EFFECTS[(ex - 1) % 3]


def scenario_presets() -> dict[str, GenerativeConfig]:
    """Scenarios S1-S3 x examples Ex1-Ex9 x three ICC levels.

    Ex1-3 are regular, Ex4-6 have a null stage-2 effect (p = 1), Ex7-9 a
    small one.  Within each triple the stage-1 effect size is 0.2, 0.5, 0.8.
    """
    out = {}
    for (s, (N, size)), ex, (rname, rho) in itertools.product(SCENARIOS.items(), range(1, 10),
                                                              RHOS.items()):
        kind, es = _example(ex)
        g = (*_BASE, *_STAGE2[kind])
        cfg = GenerativeConfig(N, size, rho, g)
        g3 = solve_gamma3(cfg, es)
        g = list(g)
        g[3] = g3
        out[f"{s}-Ex{ex}-{rname}"] = replace(cfg, gamma=tuple(g))
    return out


def select_presets(pattern: str) -> list[str]:
    """Comma-separated names or shell-style globs, in preset order."""
    names = list(scenario_presets())
    chosen: list[str] = []
    for part in (p.strip() for p in pattern.split(",")):
        if not part:
            continue
        hits = [n for n in names if fnmatchcase(n, part)]
        if not hits:
            raise ConfigError(f"unknown preset {part!r}")
        chosen += [h for h in hits if h not in chosen]
    if not chosen:
        raise ConfigError("no preset selected")
    return chosen


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimMetrics:
    label: str
    method: str
    truth: float
    bias: float
    se: float
    mse: float
    coverage: float
    mean_ci_length: float
    sd_ci_length: float
    n_runs: int
    n_failed: int
    estimates: np.ndarray = field(repr=False, compare=False)

    COLUMNS = ("preset", "method", "n_runs", "n_failed", "truth", "bias", "se", "mse",
               "coverage", "mean_ci_length", "sd_ci_length")

    def row(self) -> list[str]:
        vals = (self.truth, self.bias, self.se, self.mse, self.coverage, self.mean_ci_length,
                self.sd_ci_length)
        return [self.label, self.method, str(self.n_runs), str(self.n_failed),
                *(repr(float(v)) for v in vals)]


@dataclass(frozen=True, eq=False)
class _RunJob:
    cfg: GenerativeConfig
    methods: tuple[Method, ...]
    B: int | None
    alpha: float
    lam: float
    eta_order: float
    seed: int


def run_seeds(seed: int, run: int) -> tuple[np.random.Generator, int]:
    """Data generator and bootstrap seed for one Monte Carlo run."""
    boot = int(np.random.SeedSequence([int(seed), int(run), 1]).generate_state(1)[0])
    return np.random.default_rng([int(seed), int(run)]), boot


def _one_run(job: _RunJob, run: int) -> np.ndarray:
    """(n_methods, 3) array of estimate, lower, upper; NaN rows are failures."""
    rng, boot_seed = run_seeds(job.seed, run)
    ds = generate(job.cfg, rng)
    data = CompiledData.from_dataset(ds, sim_specs(job.cfg))
    j = SIM_SPECS[0].labels().index(PSI11)
    out = np.full((len(job.methods), 3), np.nan)
    eta = eta_from_order(job.eta_order, float(np.median(data.n)))
    point = {}
    for r, m in enumerate(job.methods):
        try:
            if job.B is None:
                if m.policy not in point:
                    point[m.policy] = fit_backward(data, wc_policy=m.policy).stage_fits[1].theta_hat[j]
                out[r] = point[m.policy], np.nan, np.nan
            else:
                res = run_bootstrap(data, method=m, B=job.B, alpha=job.alpha, lam=job.lam, eta=eta,
                                    seed=boot_seed)
                out[r] = res.point[j], res.ci_lower[j], res.ci_upper[j]
        except CQError:
            out[r] = np.nan
    return out


def _run_args(args):
    return _one_run(*args)


def run_experiment(preset: str | GenerativeConfig, methods: Iterable[str | Method] = ("MN-CB",),
                   n_runs: int = 500, B: int | None = 1000, alpha: float = 0.05,
                   lam: float = LAMBDA_DEFAULT, seed: int = 0, n_jobs: int = 1,
                   eta_order: float = 0.999, progress: Callable[[int, int], None] | None = None,
                   min_runs: int = 50) -> list[SimMetrics]:
    """Monte Carlo performance of each method for the stage-1 interaction psi11.

    ``B=None`` skips the bootstrap and reports point-estimate metrics only.
    Run ``r`` depends only on ``(seed, r)``, so results are identical for any
    worker count.
    """
    if isinstance(preset, str):
        presets = scenario_presets()
        if preset not in presets:
            raise ConfigError(f"unknown preset {preset!r}")
        label, cfg = preset, presets[preset]
    else:
        label, cfg = "custom", preset
    methods = tuple(Method.parse(m) for m in methods)
    if not methods:
        raise ConfigError("no methods given")
    if n_runs < min_runs:
        raise ConfigError(f"n_runs={n_runs} < {min_runs}")
    truth = true_stage1_params(cfg).psi11
    job = _RunJob(cfg, methods, B, alpha, lam, eta_order, int(seed))
    results = []
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            for i, r in enumerate(ex.map(_run_args, [(job, r) for r in range(n_runs)],
                                         chunksize=max(1, n_runs // (4 * n_jobs)))):
                results.append(r)
                if progress:
                    progress(i + 1, n_runs)
    else:
        for r in range(n_runs):
            results.append(_one_run(job, r))
            if progress:
                progress(r + 1, n_runs)
    arr = np.stack(results)      # (runs, methods, 3)
    metrics = []
    for i, m in enumerate(methods):
        metrics.append(summarize(label, m.value, truth, arr[:, i, 0], arr[:, i, 1], arr[:, i, 2],
                                 with_ci=B is not None))
    worst = max(mt.n_failed for mt in metrics)
    if worst > 0.10 * n_runs:
        raise ExperimentError(f"{label}: {worst} of {n_runs} runs failed")
    return metrics


def summarize(label: str, method: str, truth: float, est, lo=None, hi=None,
              with_ci: bool = True) -> SimMetrics:
    est = np.asarray(est, dtype=float)
    ok = np.isfinite(est)
    if with_ci:
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        ok &= np.isfinite(lo) & np.isfinite(hi)
    e = est[ok]
    n = int(e.size)
    if n < 2:
        raise ExperimentError(f"{label}/{method}: fewer than two successful runs")
    err = e - truth
    bias = float(err.mean())
    se = float(e.std(ddof=1))
    mse = float(np.mean(err * err))
    if with_ci:
        length = hi[ok] - lo[ok]
        cover = float(np.mean((lo[ok] <= truth) & (truth <= hi[ok])))
        lm, ls = float(length.mean()), float(length.std(ddof=1))
    else:
        cover = lm = ls = math.nan
    return SimMetrics(label, method, float(truth), bias, se, mse, cover, lm, ls, n,
                      int(est.size - n), e)


def write_metrics_csv(metrics: Sequence[SimMetrics], path) -> None:
    """One row per (preset, method); ``path`` may be an open text file."""
    if hasattr(path, "write"):
        _write_rows(metrics, path)
        return
    with open(path, "w", newline="") as fh:
        _write_rows(metrics, fh)


def _write_rows(metrics, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SimMetrics.COLUMNS)
    for m in metrics:
        w.writerow(m.row())
