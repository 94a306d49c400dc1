import warnings

import numpy as np
import pytest

from cqboot.bootstrap import (Method, bootstrap_interval, contrast_t_stats, default_eta,
                              empirical_quantile, estimate_p, eta_from_order, replicate_rng,
                              resample_exponent, resample_size, run_bootstrap,
                              write_replicates_csv)
from cqboot.data_model import ClusteredDataset, ClusterRecord, StageModelSpec
from cqboot.errors import ConfigError, InferenceFailureError
from cqboot.qlearning import CompiledData, fit_backward_grouped

from conftest import SPECS2, two_stage_dataset

STRONG = [0.0, 0.3, 0.2, 0.4, 0.1, 3.0, 0.5, 0.0]


def test_estimate_p_examples():
    assert estimate_p([10, -10, 10], 3) == 0.0
    assert estimate_p([0, 0, 5, 5], 3) == 0.5
    assert estimate_p([np.inf, 1.0], 3) == 0.5


def test_eta():
    assert eta_from_order(0.999, 20) == pytest.approx(3.579, abs=1e-3)
    assert eta_from_order(0.5, 20) == pytest.approx(0.0, abs=1e-12)
    n_next = 40
    assert default_eta(0.002 * n_next, 20, n_next) == pytest.approx(eta_from_order(0.999, 20))
    with pytest.raises(ConfigError):
        eta_from_order(0.9, 1)


def test_exponent_and_size():
    lam = 0.025
    assert resample_exponent(0.0, lam) == 1.0
    assert resample_exponent(1.0, lam) == pytest.approx(1 / (1 + lam))
    ps = np.linspace(0, 1, 101)
    assert np.all(np.diff(resample_exponent(ps, lam)) <= 0)
    assert resample_size(1.0, lam, 80) == 72
    assert resample_size(0.0, lam, 80) == 80
    sizes = [resample_size(p, 0.5, 30) for p in ps]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))
    assert resample_size(1.0, 1000.0, 10) == 2
    with pytest.raises(ConfigError):
        resample_size(1.5, lam, 10)


def test_quantile():
    assert empirical_quantile([1, 2, 3, 4, 5], 0.5) == 3
    x = np.random.default_rng(0).normal(size=1000)
    assert empirical_quantile(x, 0) == x.min() and empirical_quantile(x, 1) == x.max()
    s = np.sort(x)
    for q in (0.025, 0.3, 0.975):
        h = 999 * q
        lo = int(np.floor(h))
        assert empirical_quantile(x, q) == s[lo] + (h - lo) * (s[lo + 1] - s[lo])
    y = np.random.default_rng(1).normal(size=10 ** 4)
    for q in np.linspace(0.01, 0.99, 25):
        assert abs(empirical_quantile(y, q) - np.quantile(y, q, method="linear")) < 1e-12


def test_interval_forms():
    draws = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])
    lo, hi = bootstrap_interval(np.array([2.0]), draws, 4, 4, 0.5, "hybrid")
    # sqrt(4) (draw - 2) has quartiles -2, 2; interval 2 -/+ 2/2
    assert (lo[0], hi[0]) == (1.0, 3.0)
    lo, hi = bootstrap_interval(np.array([2.0]), draws + 1, 4, 4, 0.5, "percentile")
    assert (lo[0], hi[0]) == (2.0, 4.0)
    lo, hi = bootstrap_interval(np.array([2.0]), draws + 1, 4, 4, 0.5, "hybrid")
    assert (lo[0], hi[0]) == (0.0, 2.0)


def test_t_stats_zero_se():
    t = contrast_t_stats(np.array([1.0, 0.0]), np.zeros((2, 2)), np.array([[1.0, 0.0]]))
    assert np.isinf(t[0])
    H = np.array([[1.0, 1.0], [1.0, -1.0]])
    t = contrast_t_stats(np.array([1.0, 0.5]), np.diag([0.04, 0.01]), H)
    np.testing.assert_allclose(t, [1.5 / np.sqrt(0.05), 0.5 / np.sqrt(0.05)])


def test_reduction_to_cluster_bootstrap():
    ds = two_stage_dataset(np.random.default_rng(3), N=40, gamma=STRONG)
    a = run_bootstrap(ds, SPECS2, "MN-CB", B=200, seed=11)
    b = run_bootstrap(ds, SPECS2, "CB", B=200, seed=11)
    assert a.report.p_hat == 0.0 and a.resample_size == ds.N
    np.testing.assert_array_equal(a.ci_lower, b.ci_lower)
    np.testing.assert_array_equal(a.ci_upper, b.ci_upper)


def test_prefix_stability_and_workers():
    ds = two_stage_dataset(np.random.default_rng(4), N=30, restrict=0.3)
    small = run_bootstrap(ds, SPECS2, "MN-CB", B=100, seed=5)
    big = run_bootstrap(ds, SPECS2, "MN-CB", B=300, seed=5)
    np.testing.assert_array_equal(small.replicates, big.replicates[:100])
    par = run_bootstrap(ds, SPECS2, "MN-CB", B=300, seed=5, n_jobs=2)
    np.testing.assert_array_equal(par.replicates, big.replicates)
    np.testing.assert_array_equal(par.ci_lower, big.ci_lower)


def test_shift_equivariance():
    ds = two_stage_dataset(np.random.default_rng(6), N=30)
    c = 3.25
    shifted = ClusteredDataset(tuple(ClusterRecord(k.cluster_id, k.covariates, k.treatments,
                                                   k.outcomes + c, k.exclusions)
                                     for k in ds.clusters), 2)
    a = run_bootstrap(ds, SPECS2, B=100, seed=2)
    b = run_bootstrap(shifted, SPECS2, B=100, seed=2)
    psi = np.array([g == "psi" for g in a.groups])
    icpt = list(a.labels).index("(Intercept)")
    np.testing.assert_allclose(b.ci_lower[psi], a.ci_lower[psi], atol=1e-9)
    np.testing.assert_allclose(b.ci_upper[psi], a.ci_upper[psi], atol=1e-9)
    assert b.ci_lower[icpt] == pytest.approx(a.ci_lower[icpt] + c, abs=1e-9)


def test_degenerate_zero_length():
    clusters = []
    rng = np.random.default_rng(8)
    for i in range(20):
        x1, a1, x2, a2 = rng.choice([-1, 1], size=4)
        y = np.full(4, 1.0 + 0.5 * x1 * a1)      # no stage-2 effect, no noise
        clusters.append(ClusterRecord(f"c{i:02d}", {"x1": x1, "x2": x2}, (a1, a2), y))
    ds = ClusteredDataset(tuple(clusters), 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = run_bootstrap(ds, SPECS2, "CB", B=100, seed=1)
    j = r.labels.index("a1:x1")
    assert r.point[j] == pytest.approx(0.5, abs=1e-12)
    assert r.ci_upper[j] - r.ci_lower[j] < 1e-10


def test_config_checks(rng):
    ds = two_stage_dataset(rng, N=40)
    with pytest.raises(ConfigError):
        run_bootstrap(ds, SPECS2, B=50)
    with pytest.raises(ConfigError):
        run_bootstrap(ds, SPECS2, method="nope")
    with pytest.raises(ConfigError):
        run_bootstrap(ds, SPECS2, B=100, ci_form="studentized")
    with pytest.warns(UserWarning, match="lambda"):
        run_bootstrap(ds, SPECS2, B=100, lam=0.2)
    assert Method.parse("mn-cb") is Method.MN_CB and Method.parse("MN_B") is Method.MN_B


def test_too_many_failures():
    rng = np.random.default_rng(9)
    clusters = []
    for i in range(20):
        cov = {f"z{j}": float(i == j) for j in range(4)}
        clusters.append(ClusterRecord(f"c{i:02d}", cov, (int(rng.choice([-1, 1])),),
                                      rng.normal(size=3)))
    ds = ClusteredDataset(tuple(clusters), 1)
    spec = [StageModelSpec(1, ("z0", "z1", "z2", "z3"), ())]
    with pytest.raises(InferenceFailureError):
        run_bootstrap(ds, spec, "CB", B=100, seed=0)


def test_individual_resampling_matches_direct_refit():
    ds = two_stage_dataset(np.random.default_rng(10), N=15, restrict=0.3)
    seed = 21
    res = run_bootstrap(ds, SPECS2, "mn-B", B=100, seed=seed)
    ind = CompiledData.from_dataset(ds, SPECS2).individuals()
    m = res.resample_size
    assert res.n_pool == ind.N and m <= ind.N
    for b in (0, 7, 99):
        idx = replicate_rng(seed, b).integers(0, ind.N, size=m)
        mult = np.bincount(idx, minlength=ind.N).astype(float)
        ref = fit_backward_grouped(ind, "independence", mult[None]).fits[1].theta[0]
        np.testing.assert_allclose(res.replicates[b], ref, atol=1e-10)


def test_mnb_uses_individual_t_stats():
    ds = two_stage_dataset(np.random.default_rng(11), N=20)
    r = run_bootstrap(ds, SPECS2, "mn-B", B=100, seed=0)
    assert r.report.t_stats.size == int(ds.cluster_sizes.sum())


def test_replicates_csv(tmp_path, rng):
    ds = two_stage_dataset(rng, N=40)
    r = run_bootstrap(ds, SPECS2, B=100, seed=0)
    p = tmp_path / "r.csv"
    write_replicates_csv(r, p)
    lines = p.read_text().splitlines()
    assert len(lines) == 101 and lines[0].startswith("replicate,valid,")
