"""Model template for a two-stage implementation trial with partial re-randomization.

Clinics are randomized at stage 1; only non-responding clinics are
re-randomized at stage 2, so responders carry their observed outcome into
the stage-1 fit.  Covariates are binary clinic-level indicators (0/1):
``Rural``, ``MI`` (state), ``M6`` (high baseline mean score) and ``M12``
(high mean score before the second decision point).  Treatments ``A1`` and
``A2`` are coded -1/+1.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .data_model import ClusteredDataset, ClusterRecord, ColumnRoles, Exclusion, StageModelSpec

TREATMENTS = ("A1", "A2")
ROLES = ColumnRoles(treatments=TREATMENTS)
SPECS = (
    StageModelSpec(1, main_effects=("Rural",), tailoring=("MI", "M6"), treatment="A1"),
    StageModelSpec(2, main_effects=("Rural",), tailoring=("M12",), treatment="A2"),
)
SPEC_DOC = {
    "columns": {"cluster_id": "cluster_id", "outcome": "y", "treatments": list(TREATMENTS)},
    "1": {"main_effects": ["Rural"], "tailoring": ["MI", "M6"]},
    "2": {"main_effects": ["Rural"], "tailoring": ["M12"]},
}


def synthetic_trial(n_clusters: int = 60, sizes: tuple[int, int] = (8, 25), rho: float = 0.1,
                    sigma: float = 8.0, seed: int = 0) -> ClusteredDataset:
    """Simulated trial with the template's structure (not real trial data)."""
    rng = np.random.default_rng(seed)
    N = n_clusters
    n = rng.integers(sizes[0], sizes[1] + 1, size=N)
    rural = (rng.random(N) < 0.4).astype(float)
    mi = (rng.random(N) < 0.5).astype(float)
    m6 = (rng.random(N) < 0.5).astype(float)
    a1 = rng.choice([-1, 1], size=N)
    respond = rng.random(N) < expit(-0.4 + 0.5 * m6 + 0.3 * a1)
    m12 = (rng.random(N) < expit(-0.2 + 0.8 * m6)).astype(float)
    a2 = rng.choice([-1, 1], size=N)
    base = 50 - 6 * rural + 0.6 * mi + 0.4 * m6 + a1 * (-1.0 + 1.3 * mi + 0.8 * m6)
    stage2 = np.where(respond, 0.0, -1.5 * m12 + a2 * (-0.2 - 0.6 * m12))
    alpha = rng.normal(0, sigma * math.sqrt(rho), size=N)
    clusters = []
    for i in range(N):
        y = base[i] + stage2[i] + alpha[i] + rng.normal(0, sigma * math.sqrt(1 - rho), size=n[i])
        trt = (int(a1[i]), None if respond[i] else int(a2[i]))
        excl = (None, Exclusion.RESPONDER if respond[i] else None)
        clusters.append(ClusterRecord(f"clinic{i + 1:03d}",
                                      {"Rural": rural[i], "MI": mi[i], "M6": m6[i],
                                       "M12": m12[i]}, trt, y, excl))
    return ClusteredDataset(tuple(clusters), 2, TREATMENTS)
