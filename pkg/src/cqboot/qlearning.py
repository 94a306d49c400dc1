"""Backward-recursive clustered Q-learning.

The stage-k Q-function is linear,

    Q_k(H_k, a_k) = gamma' H_k0 + beta' H_k1 + (psi' H_k1) a_k,

fitted by GLS from stage K down to stage 1.  The stage-k pseudo-outcome for a
cluster randomized at stage k+1 is the maximized stage-(k+1) prediction,
``gamma' H0 + beta' H1 + |psi' H1|`` for a binary +/-1 treatment.  Clusters
not randomized at stage k+1 carry their outcome forward unchanged.

Because covariates are cluster level, each cluster is summarized once by its
size, outcome mean and within-cluster sum of squares, and every fit runs on
those summaries.  :func:`fit_backward_grouped` performs the recursion for a
whole batch of cluster weightings at once, which is what the bootstrap uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .data_model import ClusteredDataset, StageModelSpec, stage_rows
from .errors import InsufficientDataError, SchemaError, SingularDesignError
from .gls import (INDEPENDENCE, CorrKind, GlsFit, GroupedFit, WorkingCorrelation,
                  fit_grouped, grouped_gls_fit)

Policy = Union[str, WorkingCorrelation, Mapping[int, Union[float, None]]]


@dataclass(frozen=True)
class StageDesign:
    spec: StageModelSpec
    X: np.ndarray
    main: np.ndarray
    tailoring: np.ndarray
    included: np.ndarray


@dataclass(frozen=True, eq=False)
class CompiledData:
    """Cluster summaries plus per-stage design rows for a dataset.

    ``y`` and ``unit_of`` list individual outcomes and their cluster index;
    they are only needed for individual-level resampling.
    """

    cluster_ids: tuple[str, ...]
    n: np.ndarray
    ybar: np.ndarray
    wss: np.ndarray
    stages: tuple[StageDesign, ...]
    y: np.ndarray
    unit_of: np.ndarray

    @classmethod
    def from_dataset(cls, ds: ClusteredDataset, specs: Sequence[StageModelSpec]) -> "CompiledData":
        specs = sorted(specs, key=lambda s: s.stage)
        if [s.stage for s in specs] != list(range(1, ds.K + 1)):
            raise SchemaError(f"need one model spec per stage 1..{ds.K}, got "
                              f"{[s.stage for s in specs]}")
        stages = []
        for s in specs:
            r = stage_rows(ds, s)
            stages.append(StageDesign(s, r.X, r.main, r.tailoring, r.included))
        ys = ds.outcomes()
        n = np.array([y.size for y in ys], dtype=float)
        ybar = np.array([y.mean() for y in ys])
        wss = np.array([np.sum((y - y.mean()) ** 2) for y in ys])
        flat = np.concatenate(ys)
        unit_of = np.repeat(np.arange(len(ys)), n.astype(int))
        return cls(tuple(c.cluster_id for c in ds.clusters), n, ybar, wss, tuple(stages),
                   flat, unit_of)

    @property
    def K(self) -> int:
        return len(self.stages)

    @property
    def N(self) -> int:
        return self.n.size

    def stage(self, k: int) -> StageDesign:
        return self.stages[k - 1]

    def individuals(self) -> "CompiledData":
        """Each individual becomes its own unit (cluster structure ignored)."""
        u = self.unit_of
        stages = tuple(StageDesign(s.spec, s.X[u], s.main[u], s.tailoring[u], s.included[u])
                       for s in self.stages)
        ids = tuple(f"{self.cluster_ids[i]}#{j}" for j, i in enumerate(u))
        m = u.size
        return CompiledData(ids, np.ones(m), self.y.copy(), np.zeros(m), stages,
                            self.y.copy(), np.arange(m))


def resolve_policy(policy: Policy, k: int) -> float | None:
    """Working ICC for stage k: ``None`` means iterate."""
    if isinstance(policy, Mapping):
        v = policy.get(k)
        return None if v is None else float(v)
    if isinstance(policy, WorkingCorrelation):
        return policy.rho
    if policy == "iterated":
        return None
    if policy == CorrKind.INDEPENDENCE.value:
        return 0.0
    raise ValueError(f"unknown working-correlation policy {policy!r}")


@dataclass(frozen=True)
class GroupedBackward:
    fits: dict[int, GroupedFit]
    ybar: dict[int, np.ndarray]    # outcome means entering each stage fit, (B, N)
    wss: dict[int, np.ndarray]
    ok: np.ndarray


def fit_backward_grouped(data: CompiledData, policy: Policy = "iterated", mult=None,
                         n=None, ybar=None, wss=None, stop_stage: int = 1) -> GroupedBackward:
    """Backward recursion for a batch of cluster weightings.

    ``mult`` (B, N) counts how often each unit is used (bootstrap
    multiplicity); ``n``, ``ybar``, ``wss`` optionally override the unit
    summaries per batch entry.
    """
    mult = np.ones((1, data.N)) if mult is None else np.atleast_2d(np.asarray(mult, dtype=float))
    nb = mult.shape[0]
    n = np.broadcast_to(data.n if n is None else n, (nb, data.N))
    cur_y = np.broadcast_to(data.ybar if ybar is None else ybar, (nb, data.N))
    cur_w = np.broadcast_to(data.wss if wss is None else wss, (nb, data.N))
    fits, ys, ws = {}, {}, {}
    ok = np.ones(nb, dtype=bool)
    for k in range(data.K, stop_stage - 1, -1):
        st = data.stage(k)
        weight = mult * st.included
        fit = fit_grouped(st.X, n, cur_y, cur_w, weight, resolve_policy(policy, k))
        fits[k], ys[k], ws[k] = fit, cur_y, cur_w
        ok &= fit.ok
        if k > stop_stage:
            value = _max_value(st, fit.theta)
            inc = st.included
            cur_y = np.where(inc, value, cur_y)
            cur_w = np.where(inc, 0.0, cur_w)
    return GroupedBackward(fits, ys, ws, ok)


def _max_value(st: StageDesign, theta: np.ndarray) -> np.ndarray:
    s0, s1, s2 = st.spec.slices()
    return (theta[:, s0] @ st.main.T + theta[:, s1] @ st.tailoring.T
            + np.abs(theta[:, s2] @ st.tailoring.T))


# ---------------------------------------------------------------------------
# Single-dataset API
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageFit:
    stage: int
    spec: StageModelSpec
    gls: GlsFit

    @property
    def labels(self) -> tuple[str, ...]:
        return self.spec.labels()

    @property
    def theta_hat(self) -> np.ndarray:
        return self.gls.theta_hat

    @property
    def gamma_hat(self) -> np.ndarray:
        return self.gls.theta_hat[self.spec.slices()[0]]

    @property
    def beta_hat(self) -> np.ndarray:
        return self.gls.theta_hat[self.spec.slices()[1]]

    @property
    def psi_hat(self) -> np.ndarray:
        return self.gls.theta_hat[self.spec.slices()[2]]

    @property
    def psi_cov(self) -> np.ndarray:
        s = self.spec.slices()[2]
        return self.gls.sandwich_cov[s, s]

    def predict(self, main, tailoring, a) -> np.ndarray:
        main = np.atleast_2d(np.asarray(main, dtype=float))
        tailoring = np.atleast_2d(np.asarray(tailoring, dtype=float))
        return (main @ self.gamma_hat + tailoring @ self.beta_hat
                + np.asarray(a, dtype=float) * (tailoring @ self.psi_hat))

    def max_value(self, main, tailoring) -> np.ndarray:
        main = np.atleast_2d(np.asarray(main, dtype=float))
        tailoring = np.atleast_2d(np.asarray(tailoring, dtype=float))
        return (main @ self.gamma_hat + tailoring @ self.beta_hat
                + np.abs(tailoring @ self.psi_hat))


@dataclass(frozen=True, eq=False)
class QLearningResult:
    stage_fits: dict[int, StageFit]
    data: CompiledData = field(repr=False)
    pseudo_cluster: dict[int, np.ndarray] = field(repr=False)

    def pseudo_outcomes(self, k: int) -> list[np.ndarray]:
        """Per-individual stage-k pseudo-outcomes, one array per cluster.

        Only defined for k < K.  Individuals of a cluster share one value
        whenever the cluster was randomized at every later stage.
        """
        if k not in self.pseudo_cluster:
            raise KeyError(f"no pseudo-outcome for stage {k}")
        d = self.data
        out = []
        for i in range(d.N):
            y = d.y[d.unit_of == i]
            out.append(y.copy() if np.isnan(self.pseudo_cluster[k][i])
                       else np.full(y.size, self.pseudo_cluster[k][i]))
        return out


def _stage_fit_from_grouped(data: CompiledData, bw: GroupedBackward, k: int) -> StageFit:
    st = data.stage(k)
    fit = bw.fits[k]
    if not fit.ok[0]:
        col = int(fit.bad_col[0])
        raise SingularDesignError(
            f"stage {k} design is rank deficient at column {col} ({st.spec.labels()[col]})", col)
    gls = grouped_gls_fit(st.X, data.n, bw.ybar[k][0], bw.wss[k][0], st.included.astype(float), fit)
    return StageFit(k, st.spec, gls)


def _check_stage(data: CompiledData, k: int) -> None:
    st = data.stage(k)
    if not st.included.any():
        raise InsufficientDataError(f"no cluster is randomized at stage {k}")
    if data.n[st.included].sum() <= st.spec.n_params:
        raise InsufficientDataError(f"stage {k}: too few observations for {st.spec.n_params} "
                                    "parameters")


def _compile(ds, specs) -> CompiledData:
    if isinstance(ds, CompiledData):
        return ds
    if specs is None:
        raise SchemaError("model specs are required")
    return CompiledData.from_dataset(ds, specs)


def fit_backward(ds: ClusteredDataset | CompiledData, specs: Sequence[StageModelSpec] | None = None,
                 wc_policy: Policy = "iterated", stop_stage: int = 1) -> QLearningResult:
    """Fit stages K..stop_stage, returning the fits and the pseudo-outcomes."""
    data = _compile(ds, specs)
    for k in range(data.K, stop_stage - 1, -1):
        _check_stage(data, k)
    bw = fit_backward_grouped(data, wc_policy, stop_stage=stop_stage)
    fits = {k: _stage_fit_from_grouped(data, bw, k) for k in range(data.K, stop_stage - 1, -1)}
    pseudo = {}
    replaced = np.zeros(data.N, dtype=bool)
    for k in range(data.K - 1, stop_stage - 1, -1):
        replaced |= data.stage(k + 1).included
        pseudo[k] = np.where(replaced, bw.ybar[k][0], np.nan)
    return QLearningResult(fits, data, pseudo)


def fit_stage(ds: ClusteredDataset, spec: StageModelSpec, outcome=None,
              wc_policy: Policy = "iterated") -> StageFit:
    """Fit one stage against ``outcome`` (observed Y by default).

    ``outcome`` is one array per cluster, or a flat array over the
    individuals of the clusters randomized at this stage.
    """
    rows = stage_rows(ds, spec)
    inc = rows.included
    if not inc.any():
        raise InsufficientDataError(f"no cluster is randomized at stage {spec.stage}")
    sizes = ds.cluster_sizes
    if outcome is None:
        per = ds.outcomes()
    elif len(outcome) == ds.N and all(np.ndim(o) == 1 for o in outcome):
        per = [np.asarray(o, dtype=float) for o in outcome]
    else:
        flat = np.asarray(outcome, dtype=float).reshape(-1)
        if flat.size != sizes[inc].sum():
            raise ValueError(f"outcome has {flat.size} values, stage {spec.stage} has "
                             f"{sizes[inc].sum()} individuals")
        parts = iter(np.split(flat, np.cumsum(sizes[inc])[:-1]))
        per = [next(parts) if i else np.zeros(s) for i, s in zip(inc, sizes)]
    for i, (y, s) in enumerate(zip(per, sizes)):
        if inc[i] and y.size != s:
            raise ValueError(f"cluster {ds.clusters[i].cluster_id!r}: {y.size} outcomes for {s} "
                             "individuals")
    n = sizes.astype(float)
    ybar = np.array([y.mean() if inc[i] else 0.0 for i, y in enumerate(per)])
    wss = np.array([np.sum((y - y.mean()) ** 2) if inc[i] else 0.0 for i, y in enumerate(per)])
    if n[inc].sum() <= spec.n_params:
        raise InsufficientDataError(f"stage {spec.stage}: too few observations")
    weight = inc.astype(float)
    fit = fit_grouped(rows.X, n, ybar, wss, weight, resolve_policy(wc_policy, spec.stage))
    if not fit.ok[0]:
        col = int(fit.bad_col[0])
        raise SingularDesignError(f"stage {spec.stage} design is rank deficient at column {col}",
                                  col)
    return StageFit(spec.stage, spec, grouped_gls_fit(rows.X, n, ybar, wss, weight, fit))


def pseudo_outcome(fit_next: StageFit, ds: ClusteredDataset,
                   carried: Sequence[np.ndarray] | None = None) -> list[np.ndarray]:
    """Stage-k pseudo-outcomes given the stage-(k+1) fit, one array per cluster.

    Clusters not randomized at stage k+1 keep ``carried`` (observed Y by
    default).
    """
    if fit_next.stage < 2 or fit_next.stage > ds.K:
        raise ValueError(f"no earlier stage precedes stage {fit_next.stage}")
    rows = stage_rows(ds, fit_next.spec)
    value = fit_next.max_value(rows.main, rows.tailoring)
    carried = ds.outcomes() if carried is None else carried
    return [np.full(c.n, value[i]) if rows.included[i] else np.asarray(carried[i], dtype=float)
            for i, c in enumerate(ds.clusters)]


def decision_rule(fit: StageFit, h1) -> tuple[int, bool]:
    """Recommended treatment sign(psi' h1); ties go to +1 and are flagged."""
    h1 = np.asarray(h1, dtype=float).reshape(-1)
    if h1.size != fit.psi_hat.size:
        raise ValueError(f"tailoring history has {h1.size} entries, expected {fit.psi_hat.size}")
    c = float(fit.psi_hat @ h1)
    if c == 0.0:
        return 1, True
    return (1 if c > 0 else -1), False


__all__ = ["CompiledData", "QLearningResult", "StageFit", "decision_rule", "fit_backward",
           "fit_backward_grouped", "fit_stage", "pseudo_outcome", "INDEPENDENCE"]
