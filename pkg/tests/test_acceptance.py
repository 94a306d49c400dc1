"""Acceptance criteria 1-10.

Each check returns ``(passed, detail)``; pytest asserts it and records the
line for the end-of-session summary.  ``python tests/test_acceptance.py``
runs the same checks and prints one line per criterion.
"""

from __future__ import annotations

import os
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE, SPECS2, dense_gls, two_stage_dataset  # noqa: E402

from cqboot.bootstrap import resample_exponent, resample_size, run_bootstrap  # noqa: E402
from cqboot.gls import WorkingCorrelation, solve_gls  # noqa: E402
from cqboot.qlearning import CompiledData, _max_value, fit_backward  # noqa: E402
from cqboot.simulation import (PSI11, GenerativeConfig, generate, run_experiment,  # noqa: E402
                               scenario_presets, sim_specs, true_stage1_params)

SEED = 20261014                 # fixed before any criterion was run
WORKERS = os.cpu_count() or 1

# criterion 1
C1_INSTANCES, C1_TOL, C1_SECONDS = 200, 1e-10, 5.0
# criterion 2
C2_SECONDS = 1.0
# criterion 3
C3_LAMBDA, C3_N, C3_M = 0.025, 80, 72
# criterion 4
C4_CASES, C4_TOL = 10 ** 4, 1e-12
# criterion 5
C5_DRAWS, C5_SES, C5_N, C5_FIT_TOL, C5_SECONDS = 10 ** 7, 3.0, 2000, 0.02, 120.0
# criteria 6, 7
C6_RUNS, C6_B = 200, 500
C6_MNCB_RANGE = (0.935, 0.99)
C6_MNB_MAX_RHO20 = 0.85
C6_CB_GAP = 0.015
C7_MNB_MAX, C7_MNCB_MIN = 0.60, 0.88
# criterion 8
C8_RUNS, C8_GAIN = 300, (0.02, 0.20)
# criterion 9
C9_RUNS, C9_BIAS = 300, 0.02
# criterion 10
C10_ARGS = ["--preset", "S1-Ex4-rho05", "--methods", "mn-B,CB,MN-CB", "--runs", "50",
            "--boot", "100", "--seed", "7"]


def _record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    return bool(ok), detail


# ---------------------------------------------------------------------------

def check_1():
    rng = np.random.default_rng(SEED)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(C1_INSTANCES):
        N = int(rng.integers(1, 6))
        p = int(rng.integers(1, 4))
        rho = float(rng.uniform(0, 0.9))
        while True:
            sizes = rng.integers(1, 7, size=N)
            if sizes.sum() > p:
                break
        blocks = [(rng.normal(size=(n, p)), rng.normal(size=n)) for n in sizes]
        fit = solve_gls(blocks, WorkingCorrelation.exchangeable(rho))
        ref, _ = dense_gls(blocks, rho)
        worst = max(worst, float(np.max(np.abs(fit.theta_hat - ref))))
    dt = time.perf_counter() - t0
    return _record(1, worst <= C1_TOL and dt < C1_SECONDS,
                   f"max |diff| = {worst:.2e} (tol {C1_TOL:g}), {dt:.2f}s")


def check_2():
    t0 = time.perf_counter()
    strong = [0.0, 0.3, 0.2, 0.4, 0.1, 3.0, 0.5, 0.0]
    same, p_zero = True, True
    for s in range(3):
        ds = two_stage_dataset(np.random.default_rng([SEED, s]), N=40, gamma=strong)
        a = run_bootstrap(ds, SPECS2, "MN-CB", B=100, seed=s)
        b = run_bootstrap(ds, SPECS2, "CB", B=100, seed=s)
        p_zero &= a.report.p_hat == 0.0 and a.resample_size == ds.N
        same &= bool(np.array_equal(a.ci_lower, b.ci_lower)
                     and np.array_equal(a.ci_upper, b.ci_upper))
    dt = time.perf_counter() - t0
    return _record(2, same and p_zero and dt < C2_SECONDS,
                   f"p_hat=0: {p_zero}, identical CIs: {same}, {dt:.2f}s")


def check_3():
    f = resample_exponent(np.linspace(0, 1, 1001), C3_LAMBDA)
    conds = {
        "f(0)=1": resample_exponent(0.0, C3_LAMBDA) == 1.0,
        "monotone": bool(np.all(np.diff(f) <= 0)),
        "M(1)=72": resample_size(1.0, C3_LAMBDA, C3_N) == C3_M,
        "clamp": (resample_size(1.0, 50.0, C3_N) == 2 and resample_size(0.0, C3_LAMBDA, 7) == 7),
    }
    return _record(3, all(conds.values()), ", ".join(f"{k}: {v}" for k, v in conds.items()))


def check_4():
    rng = np.random.default_rng(SEED)
    ds = two_stage_dataset(rng, N=100)
    st = CompiledData.from_dataset(ds, SPECS2).stage(2)
    s0, s1, s2 = st.spec.slices()
    theta = rng.normal(size=(C4_CASES // ds.N, st.spec.n_params)) * 2
    got = _max_value(st, theta)
    worst = 0.0
    for b in range(theta.shape[0]):
        g, be, ps = theta[b, s0], theta[b, s1], theta[b, s2]
        pred = [st.main @ g + st.tailoring @ be + a * (st.tailoring @ ps) for a in (-1.0, 1.0)]
        worst = max(worst, float(np.max(np.abs(got[b] - np.maximum(*pred)))))
    # the recursion itself, on fitted models
    for s in range(20):
        d = two_stage_dataset(np.random.default_rng([SEED, s]), N=30, restrict=0.3)
        res = fit_backward(d, SPECS2)
        f2 = res.stage_fits[2]
        st2 = res.data.stage(2)
        best = np.maximum(f2.predict(st2.main, st2.tailoring, -1.0),
                          f2.predict(st2.main, st2.tailoring, 1.0))
        for i, y in enumerate(res.pseudo_outcomes(1)):
            if st2.included[i]:
                worst = max(worst, float(np.max(np.abs(y - best[i]))))
    n = theta.shape[0] * ds.N
    return _record(4, worst <= C4_TOL, f"{n} random cases + 20 fits, max |diff| = {worst:.2e}")


def mc_projection(cfg: GenerativeConfig, draws: int, seed, chunk: int = 10 ** 6):
    """Monte Carlo psi10, psi11 and their standard errors (independent of the enumeration)."""
    rng = np.random.default_rng(seed)
    g = np.array(cfg.gamma)
    d0, d1, d2 = cfg.delta
    s = np.zeros(2)
    ss = np.zeros(2)
    for start in range(0, draws, chunk):
        m = min(chunk, draws - start)
        x1 = rng.choice([-1.0, 1.0], size=m)
        a1 = rng.choice([-1.0, 1.0], size=m)
        x2 = np.where(rng.random(m) < expit(d0 + d1 * x1 + d2 * a1), 1.0, -1.0)
        v = (g[0] + g[1] * x1 + g[2] * a1 + g[3] * x1 * a1 + g[4] * x2
             + np.abs(g[5] + g[6] * x2 + g[7] * a1))
        # regressors (1, x1, a1, x1 a1) are orthonormal under the design
        z = np.stack([v * a1, v * x1 * a1])
        s += z.sum(axis=1)
        ss += (z * z).sum(axis=1)
    mean = s / draws
    se = np.sqrt((ss / draws - mean ** 2) / draws)
    return mean, se


def check_5():
    t0 = time.perf_counter()
    cache = {}
    worst = 0.0
    for name, cfg in scenario_presets().items():
        key = (cfg.gamma, cfg.delta)
        if key not in cache:
            cache[key] = mc_projection(cfg, C5_DRAWS, [SEED, len(cache)])
        mean, se = cache[key]
        t = true_stage1_params(cfg)
        z = np.abs(np.array([t.psi10, t.psi11]) - mean) / se
        worst = max(worst, float(z.max()))
    cfg = scenario_presets()["S1-Ex1-rho05"]
    big = GenerativeConfig(C5_N, cfg.cluster_size, cfg.rho, cfg.gamma, cfg.delta)
    fit = fit_backward(generate(big, np.random.default_rng(SEED)), sim_specs(big)).stage_fits[1]
    err = abs(fit.theta_hat[fit.labels.index(PSI11)] - true_stage1_params(big).psi11)
    dt = time.perf_counter() - t0
    ok = worst <= C5_SES and err < C5_FIT_TOL and dt < C5_SECONDS
    return _record(5, ok, f"{len(cache)} distinct configs, worst |z| = {worst:.2f}; "
                          f"N={C5_N} fit error {err:.4f}; {dt:.1f}s")


def _coverage(preset, methods, runs=C6_RUNS, B=C6_B):
    ms = run_experiment(preset, methods, n_runs=runs, B=B, seed=SEED, n_jobs=WORKERS)
    return {m.method: m for m in ms}


def check_6():
    parts, ok = [], True
    for rho in ("rho05", "rho10", "rho20"):
        m = _coverage(f"S1-Ex1-{rho}", ["mn-B", "CB", "MN-CB"])
        c_mn, c_cb, c_b = m["MN-CB"].coverage, m["CB"].coverage, m["mn-B"].coverage
        ok &= C6_MNCB_RANGE[0] <= c_mn <= C6_MNCB_RANGE[1]
        ok &= abs(c_cb - c_mn) <= C6_CB_GAP + 1e-12
        if rho == "rho20":
            ok &= c_b < C6_MNB_MAX_RHO20
        parts.append(f"{rho}: MN-CB {100 * c_mn:.1f} CB {100 * c_cb:.1f} mn-B {100 * c_b:.1f}")
    return _record(6, ok, "; ".join(parts))


def check_7():
    m = _coverage("S2-Ex1-rho20", ["mn-B", "MN-CB"])
    c_b, c_mn = m["mn-B"].coverage, m["MN-CB"].coverage
    return _record(7, c_b < C7_MNB_MAX and c_mn >= C7_MNCB_MIN,
                   f"mn-B {100 * c_b:.1f} (< {100 * C7_MNB_MAX:.0f}), MN-CB {100 * c_mn:.1f} "
                   f"(>= {100 * C7_MNCB_MIN:.0f}); failed runs {m['MN-CB'].n_failed}")


def check_8():
    ms = run_experiment("S3-Ex1-rho20", ["MN-CB", "MN-CB-w"], n_runs=C8_RUNS, B=None, seed=SEED,
                        n_jobs=WORKERS)
    gain = 1 - ms[0].mse / ms[1].mse
    ok = ms[0].mse <= ms[1].mse and C8_GAIN[0] <= gain <= C8_GAIN[1]
    return _record(8, ok, f"MSE {ms[0].mse:.5f} vs {ms[1].mse:.5f}, gain {100 * gain:.1f}%")


def check_9():
    worst, where = 0.0, ""
    for name in scenario_presets():
        m = run_experiment(name, ["MN-CB"], n_runs=C9_RUNS, B=None, seed=SEED,
                           n_jobs=WORKERS)[0]
        if abs(m.bias) >= worst:
            worst, where = abs(m.bias), name
    return _record(9, worst < C9_BIAS, f"max |bias| = {worst:.4f} ({where}) over 81 presets")


def check_10():
    with tempfile.TemporaryDirectory() as tmp:
        outs = []
        for i, par in enumerate(("1", "1", "8")):
            out = Path(tmp) / f"m{i}.csv"
            subprocess.run([sys.executable, "-m", "cqboot.cli", "simulate", *C10_ARGS,
                            "--parallel", par, "--out", str(out)], check=True)
            outs.append(out.read_bytes())
    same = outs[0] == outs[1] == outs[2]
    return _record(10, same, f"rerun identical: {outs[0] == outs[1]}, "
                             f"--parallel 1 vs 8 identical: {outs[0] == outs[2]}")


CHECKS = {k: globals()[f"check_{k}"] for k in range(1, 11)}


@pytest.mark.parametrize("k", [pytest.param(k, marks=pytest.mark.slow) if k >= 5 else k
                               for k in sorted(CHECKS)])
def test_criterion(k):
    ok, detail = CHECKS[k]()
    assert ok, detail


if __name__ == "__main__":
    fails = 0
    for k, fn in CHECKS.items():
        ok, detail = fn()
        fails += not ok
        print(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
    sys.exit(1 if fails else 0)
