"""In-memory representation of a K-stage clustered SMART dataset.

A dataset is an ordered, immutable collection of :class:`ClusterRecord`
objects.  All covariates are cluster level; each cluster carries one
treatment per stage, or ``None`` when the cluster was not randomized at that
stage, together with the reason it was left out.

Model terms
-----------
A :class:`StageModelSpec` names its terms as strings.  A term is either a
covariate name, an earlier-stage treatment column (``"a1"`` in a stage-2
model) or a product of those joined by ``*`` (``"x1*a1"``).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import DomainError, InsufficientDataError, IntegrityError, SchemaError

#: CSV spellings of an absent treatment, mapped to the recorded reason.
ABSENT_CODES = {"": "design", "NA": "design", "R": "responder"}


class Exclusion(str, Enum):
    DESIGN = "design"
    RESPONDER = "responder"


@dataclass(frozen=True, eq=False)
class ClusterRecord:
    cluster_id: str
    covariates: Mapping[str, float]
    treatments: tuple[int | None, ...]
    outcomes: np.ndarray
    exclusions: tuple[Exclusion | None, ...] = ()

    def __post_init__(self):
        y = np.array(self.outcomes, dtype=float).reshape(-1)
        y.setflags(write=False)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "covariates",
                           MappingProxyType({str(k): float(v) for k, v in self.covariates.items()}))
        trt = tuple(None if a is None else int(a) for a in self.treatments)
        object.__setattr__(self, "treatments", trt)
        excl = tuple(self.exclusions) or tuple(Exclusion.DESIGN if a is None else None for a in trt)
        excl = tuple(None if e is None else Exclusion(e) for e in excl)
        object.__setattr__(self, "exclusions", excl)

        if y.size < 1:
            raise DomainError(f"cluster {self.cluster_id!r} has no individuals")
        if not np.all(np.isfinite(y)):
            raise DomainError(f"cluster {self.cluster_id!r} has non-finite outcomes")
        for name, v in self.covariates.items():
            if not math.isfinite(v):
                raise DomainError(f"cluster {self.cluster_id!r}: covariate {name!r} is not finite")
        if len(excl) != len(trt):
            raise DomainError(f"cluster {self.cluster_id!r}: exclusion flags do not match stages")
        for k, (a, e) in enumerate(zip(trt, excl), start=1):
            if a is not None and a not in (-1, 1):
                raise DomainError(f"cluster {self.cluster_id!r}: treatment a{k}={a} not in {{-1, +1}}")
            if (a is None) != (e is not None):
                raise DomainError(f"cluster {self.cluster_id!r}: stage {k} needs an exclusion reason "
                                  "exactly when the treatment is absent")

    @property
    def n(self) -> int:
        return int(self.outcomes.size)

    def included(self, k: int) -> bool:
        return self.treatments[k - 1] is not None

    def __eq__(self, other):
        if not isinstance(other, ClusterRecord):
            return NotImplemented
        return (self.cluster_id == other.cluster_id
                and dict(self.covariates) == dict(other.covariates)
                and self.treatments == other.treatments
                and self.exclusions == other.exclusions
                and np.array_equal(self.outcomes, other.outcomes))

    __hash__ = None


@dataclass(frozen=True)
class ClusteredDataset:
    clusters: tuple[ClusterRecord, ...]
    K: int
    treatment_labels: tuple[str, ...] = ()

    def __post_init__(self):
        clusters = tuple(self.clusters)
        object.__setattr__(self, "clusters", clusters)
        object.__setattr__(self, "treatment_labels", tuple(self.treatment_labels))
        if self.K < 1:
            raise DomainError("a dataset needs at least one stage")
        if self.treatment_labels and len(self.treatment_labels) != self.K:
            raise DomainError("one treatment label per stage is required")
        ids = [c.cluster_id for c in clusters]
        if len(set(ids)) != len(ids):
            raise IntegrityError("cluster ids are not unique")
        for c in clusters:
            if len(c.treatments) != self.K:
                raise DomainError(f"cluster {c.cluster_id!r} has {len(c.treatments)} treatments, "
                                  f"expected {self.K}")
        if self.stage_counts[-1] < 2:
            raise InsufficientDataError(f"stage {self.K} has fewer than two randomized clusters")

    @property
    def N(self) -> int:
        return len(self.clusters)

    @property
    def stage_counts(self) -> tuple[int, ...]:
        return tuple(sum(c.included(k) for c in self.clusters) for k in range(1, self.K + 1))

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.array([c.n for c in self.clusters], dtype=int)

    @property
    def treatment_names(self) -> tuple[str, ...]:
        return self.treatment_labels or tuple(f"a{k}" for k in range(1, self.K + 1))

    def covariate_names(self) -> tuple[str, ...]:
        names: dict[str, None] = {}
        for c in self.clusters:
            names.update(dict.fromkeys(c.covariates))
        return tuple(names)

    def outcomes(self) -> list[np.ndarray]:
        return [c.outcomes for c in self.clusters]


def _split_term(term: str) -> tuple[str, ...]:
    parts = tuple(p.strip() for p in term.split("*"))
    if not term.strip() or any(not p for p in parts):
        raise SchemaError(f"malformed model term {term!r}")
    return parts


@dataclass(frozen=True)
class StageModelSpec:
    """Columns entering the stage-k Q-function model.

    ``tailoring`` excludes the intercept, which is always prepended, so the
    first treatment-interaction coefficient is the main treatment effect.
    """

    stage: int
    main_effects: tuple[str, ...] = ()
    tailoring: tuple[str, ...] = ()
    treatment: str = field(default="")

    def __post_init__(self):
        object.__setattr__(self, "main_effects", tuple(self.main_effects))
        object.__setattr__(self, "tailoring", tuple(self.tailoring))
        if not self.treatment:
            object.__setattr__(self, "treatment", f"a{self.stage}")
        if self.stage < 1:
            raise SchemaError("stage numbers start at 1")
        clash = set(self.main_effects) & set(self.tailoring)
        if clash:
            raise SchemaError(f"stage {self.stage}: terms {sorted(clash)} are both main effects "
                              "and tailoring variables")
        for t in self.main_effects + self.tailoring:
            if self.treatment in _split_term(t):
                raise SchemaError(f"stage {self.stage}: term {t!r} uses the current treatment")

    @property
    def n_main(self) -> int:
        return len(self.main_effects)

    @property
    def n_tailoring(self) -> int:
        """Length of the tailoring history, intercept included."""
        return len(self.tailoring) + 1

    @property
    def n_params(self) -> int:
        return self.n_main + 2 * self.n_tailoring

    def labels(self) -> tuple[str, ...]:
        a = self.treatment
        tail = tuple(t.replace("*", ":") for t in self.tailoring)
        return (tuple(t.replace("*", ":") for t in self.main_effects) + ("(Intercept)",) + tail
                + (a,) + tuple(f"{a}:{t}" for t in tail))

    def groups(self) -> tuple[str, ...]:
        q = self.n_tailoring
        return ("gamma",) * self.n_main + ("beta",) * q + ("psi",) * q

    def slices(self) -> tuple[slice, slice, slice]:
        p0, q = self.n_main, self.n_tailoring
        return slice(0, p0), slice(p0, p0 + q), slice(p0 + q, p0 + 2 * q)

    def factors(self) -> set[str]:
        out: set[str] = set()
        for t in self.main_effects + self.tailoring:
            out.update(_split_term(t))
        return out


def _term_value(term: str, rec: ClusterRecord, stage: int, treatment_names: Sequence[str]) -> float:
    value = 1.0
    for f in _split_term(term):
        if f in treatment_names:
            j = treatment_names.index(f) + 1
            if j >= stage:
                raise SchemaError(f"stage {stage} term {term!r} refers to a later treatment")
            a = rec.treatments[j - 1]
            if a is None:
                raise DomainError(f"cluster {rec.cluster_id!r}: term {term!r} needs {f}, "
                                  "which is absent")
            value *= a
        elif f in rec.covariates:
            value *= rec.covariates[f]
        else:
            raise SchemaError(f"cluster {rec.cluster_id!r}: unknown column {f!r} in term {term!r}")
    return value


class StageRows(NamedTuple):
    """Cluster-level design of one stage.

    ``main`` and ``tailoring`` hold H_k0 and H_k1 (intercept first); ``X`` is
    ``[main | tailoring | a_k * tailoring]``.  Rows of excluded clusters are
    zero.
    """

    X: np.ndarray
    main: np.ndarray
    tailoring: np.ndarray
    treatment: np.ndarray
    included: np.ndarray


def stage_rows(ds: ClusteredDataset, spec: StageModelSpec) -> StageRows:
    k = spec.stage
    if k > ds.K:
        raise SchemaError(f"stage {k} exceeds the dataset's {ds.K} stages")
    names = ds.treatment_names
    N = ds.N
    H0 = np.zeros((N, spec.n_main))
    H1 = np.zeros((N, spec.n_tailoring))
    a = np.zeros(N)
    inc = np.zeros(N, dtype=bool)
    for i, rec in enumerate(ds.clusters):
        if not rec.included(k):
            continue
        inc[i] = True
        a[i] = rec.treatments[k - 1]
        H0[i] = [_term_value(t, rec, k, names) for t in spec.main_effects]
        H1[i] = [1.0] + [_term_value(t, rec, k, names) for t in spec.tailoring]
    X = np.hstack([H0, H1, a[:, None] * H1])
    return StageRows(X, H0, H1, a, inc)


class DesignBlock(NamedTuple):
    X: np.ndarray
    y: np.ndarray
    included: bool


def design_matrices(ds: ClusteredDataset, spec: StageModelSpec,
                    outcomes: Sequence[np.ndarray] | None = None) -> list[DesignBlock]:
    """Per-cluster design blocks for the stage named by ``spec``.

    ``outcomes`` defaults to the observed Y; pass pseudo-outcomes for earlier
    stages.  Rows are duplicated ``n_i`` times since covariates are cluster
    level.
    """
    rows = stage_rows(ds, spec)
    if not rows.included.any():
        raise InsufficientDataError(f"no cluster is randomized at stage {spec.stage}")
    outcomes = ds.outcomes() if outcomes is None else outcomes
    blocks = []
    for i, rec in enumerate(ds.clusters):
        y = np.asarray(outcomes[i], dtype=float)
        X = np.repeat(rows.X[i:i + 1], rec.n, axis=0)
        blocks.append(DesignBlock(X, y, bool(rows.included[i])))
    return blocks


# ---------------------------------------------------------------------------
# Model-spec documents and CSV files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ColumnRoles:
    cluster_id: str = "cluster_id"
    outcome: str = "y"
    treatments: tuple[str, ...] = ()

    def treatment_columns(self, K: int) -> tuple[str, ...]:
        return tuple(self.treatments) if self.treatments else tuple(f"a{k}" for k in range(1, K + 1))


def parse_model_spec(doc: Mapping) -> tuple[list[StageModelSpec], ColumnRoles]:
    """Parse ``{"1": {"main_effects": [...], "tailoring": [...]}, ...}``.

    An optional ``"columns"`` entry overrides the default column roles.
    """
    doc = dict(doc)
    cols = doc.pop("columns", {}) or {}
    stages = doc.pop("stages", None)
    if stages is None:
        stages = doc
    elif doc:
        raise SchemaError(f"unexpected model-spec keys {sorted(doc)}")
    try:
        keys = sorted(int(k) for k in stages)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"stage keys must be integers: {exc}") from None
    if keys != list(range(1, len(keys) + 1)):
        raise SchemaError(f"stages must be numbered 1..K, got {keys}")
    specs = []
    for k in keys:
        entry = stages[str(k)] if str(k) in stages else stages[k]
        unknown = set(entry) - {"main_effects", "tailoring"}
        if unknown:
            raise SchemaError(f"stage {k}: unknown keys {sorted(unknown)}")
        specs.append(StageModelSpec(k, tuple(entry.get("main_effects", ())),
                                    tuple(entry.get("tailoring", ()))))
    roles = ColumnRoles(cols.get("cluster_id", "cluster_id"), cols.get("outcome", "y"),
                        tuple(cols.get("treatments", ())))
    if roles.treatments:
        if len(roles.treatments) != len(specs):
            raise SchemaError("one treatment column per stage is required")
        specs = [StageModelSpec(s.stage, s.main_effects, s.tailoring, roles.treatments[s.stage - 1])
                 for s in specs]
    return specs, roles


def load_model_spec(path: str | Path) -> tuple[list[StageModelSpec], ColumnRoles]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: line {exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: model spec must be a JSON object")
    return parse_model_spec(doc)


def _parse_float(text: str, where: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DomainError(f"{where}: {text!r} is not a number") from None
    if not math.isfinite(v):
        raise DomainError(f"{where}: {text!r} is not finite")
    return v


def _parse_treatment(text: str, where: str) -> tuple[int | None, Exclusion | None]:
    t = text.strip()
    if t in ABSENT_CODES:
        return None, Exclusion(ABSENT_CODES[t])
    try:
        v = float(t)
    except ValueError:
        v = math.nan
    if v not in (-1.0, 1.0):
        raise DomainError(f"{where}: treatment {text!r} not in {{-1, 1, NA, R, blank}}")
    return int(v), None


def load_csv(path: str | Path, specs: Sequence[StageModelSpec] | None = None,
             roles: ColumnRoles | None = None, K: int | None = None) -> ClusteredDataset:
    """Read one-row-per-individual CSV into a :class:`ClusteredDataset`.

    Every column other than the id, outcome and treatment columns is taken
    as a cluster-level covariate.  Clusters are ordered by id.
    """
    roles = roles or ColumnRoles()
    if K is None:
        K = len(specs) if specs else len(roles.treatments)
    if not K:
        raise SchemaError("number of stages unknown: pass specs, K or treatment columns")
    trt_cols = roles.treatment_columns(K)
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = [roles.cluster_id, roles.outcome, *trt_cols]
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}: line 1: missing columns {missing}")
        cov_cols = [c for c in header if c not in required]
        if specs:
            known = set(cov_cols) | set(trt_cols)
            for s in specs:
                absent = sorted(s.factors() - known)
                if absent:
                    raise SchemaError(f"{path}: line 1: stage {s.stage} model uses missing "
                                      f"columns {absent}")
        groups: dict[str, dict] = {}
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}: line {lineno}"
            if None in row or any(v is None for v in row.values()):
                raise SchemaError(f"{where}: wrong number of fields")
            cid = row[roles.cluster_id].strip()
            if not cid:
                raise DomainError(f"{where}: empty cluster id")
            y = _parse_float(row[roles.outcome], where)
            trt = tuple(_parse_treatment(row[c], f"{where}, column {c}") for c in trt_cols)
            cov = {c: _parse_float(row[c], f"{where}, column {c}") for c in cov_cols}
            g = groups.get(cid)
            if g is None:
                groups[cid] = {"trt": trt, "cov": cov, "y": [y], "line": lineno}
                continue
            if g["trt"] != trt:
                raise IntegrityError(f"{where}: treatments differ from line {g['line']} "
                                     f"for cluster {cid!r}")
            diff = [c for c in cov_cols if cov[c] != g["cov"][c]]
            if diff:
                raise IntegrityError(f"{where}: cluster-level column {diff[0]!r} differs from "
                                     f"line {g['line']} for cluster {cid!r}")
            g["y"].append(y)
    if not groups:
        raise InsufficientDataError(f"{path}: no data rows")
    records = [ClusterRecord(cid, g["cov"], tuple(a for a, _ in g["trt"]), np.array(g["y"]),
                             tuple(e for _, e in g["trt"]))
               for cid, g in sorted(groups.items())]
    return ClusteredDataset(tuple(records), K, trt_cols)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(ds: ClusteredDataset, path: str | Path, roles: ColumnRoles | None = None) -> None:
    roles = roles or ColumnRoles(treatments=ds.treatment_names)
    trt_cols = roles.treatment_columns(ds.K)
    covs = ds.covariate_names()
    codes = {Exclusion.DESIGN: "NA", Exclusion.RESPONDER: "R"}
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([roles.cluster_id, roles.outcome, *trt_cols, *covs])
        for c in ds.clusters:
            trt = [codes[e] if a is None else str(a) for a, e in zip(c.treatments, c.exclusions)]
            cov = [_fmt(c.covariates[n]) for n in covs]
            for y in c.outcomes:
                w.writerow([c.cluster_id, _fmt(y), *trt, *cov])


def make_dataset(clusters: Iterable[ClusterRecord], K: int) -> ClusteredDataset:
    """Build a dataset with the canonical (sorted by id) cluster order."""
    return ClusteredDataset(tuple(sorted(clusters, key=lambda c: c.cluster_id)), K)
