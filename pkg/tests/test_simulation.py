import io
import math

import numpy as np
import pytest

from clusterhrk.core import ClusteredDataset
from clusterhrk.errors import ConfigError, EmptySubsample, NonpositiveSize, NotDivisible
from clusterhrk.oracle import re_covariance, true_vec_v, unvec
from clusterhrk.simulation import (
    SV1,
    SV2,
    SV3,
    Balanced,
    BySize,
    RandomWithReplacement,
    SimulationConfig,
    Unbalanced,
    _re_params,
    cluster_sizes,
    draw_errors,
    generate_design,
    resample_clusters,
    run_study,
    select_clusters,
    stream,
    true_covariance,
)


def test_balanced_sizes():
    assert cluster_sizes(14, 2800, Balanced()).tolist() == [200] * 14
    assert cluster_sizes(2, 4, Balanced()).tolist() == [2, 2]
    with pytest.raises(NotDivisible):
        cluster_sizes(14, 2801, Balanced())


def test_unbalanced_sizes():
    s = cluster_sizes(14, 2800, Unbalanced(2.0))
    assert s.sum() == 2800
    assert s.min() == 67 and s.max() == 438
    assert np.all(np.diff(s) > 0)
    with pytest.raises(NonpositiveSize):
        cluster_sizes(14, 20, Unbalanced(40.0))


def test_config_validation():
    with pytest.raises(ConfigError) as e:
        SimulationConfig(treated=(14,))
    assert e.value.field == "treated"
    with pytest.raises(ConfigError) as e:
        SimulationConfig(methods=("UV4(RV0)",))
    assert e.value.field == "methods"
    with pytest.raises(ConfigError):
        SimulationConfig(levels=(1.0,))
    with pytest.raises(ConfigError):
        SimulationConfig(n_clusters=1)
    assert SimulationConfig().sweep().treated == tuple(range(1, 14))


def test_design_dummy_and_determinism():
    cfg = SimulationConfig(n=700, replications=0)
    X, cl = generate_design(cfg, 5)
    d = X[:, 1]
    for c in range(14):
        v = d[cl == c]
        assert np.all(v == v[0]) and v[0] == (1.0 if c < 5 else 0.0)
    X2, _ = generate_design(cfg, 5)
    np.testing.assert_array_equal(X, X2)
    X3, _ = generate_design(cfg, 9)
    np.testing.assert_array_equal(X[:, 2], X3[:, 2])  # x shared across the sweep
    X4, _ = generate_design(SimulationConfig(n=700, redraw_x=True, replications=0), 9)
    assert not np.array_equal(X4[:, 2], X3[:, 2])


def test_x_moments():
    X, _ = generate_design(SimulationConfig(replications=0), 1)
    x = X[:, 2]
    n = x.size
    assert abs(x.mean()) < 4 / math.sqrt(n)
    assert abs(x.var() - 1) < 4 * math.sqrt(2 / n)


def test_sv2_variance_range():
    s2, t2 = _re_params(SV2(), 14)
    assert s2[0] == pytest.approx(2.0) and s2[-1] == pytest.approx(1.0)
    assert np.all(np.diff(s2) < 0)
    np.testing.assert_allclose(t2, 0.1 * s2)


def test_error_covariance_monte_carlo():
    rng = stream(123, 9)
    R = 100_000
    draws = np.array([draw_errors(SV1(1.0, 0.1), [3], np.zeros(3), rng) for _ in range(R)])
    S = np.cov(draws, rowvar=False, bias=True)
    target = np.eye(3) + 0.1
    # var of a sample covariance entry for normal data: (s_ii s_jj + s_ij^2) / R
    se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / R)
    assert np.all(np.abs(S - target) < 3 * se)


def test_independent_errors_uncorrelated():
    rng = stream(5, 1)
    draws = np.array([draw_errors(SV1(1.0, 0.0), [4], np.zeros(4), rng) for _ in range(20_000)])
    C = np.corrcoef(draws, rowvar=False)
    off = C[~np.eye(4, dtype=bool)]
    assert np.abs(off).max() < 4 / math.sqrt(20_000)


@pytest.mark.parametrize("design", [SV1(1.0, 0.1), SV2(), SV3(1.0, 0.1)])
def test_true_covariance_matches_dense(design):
    cfg = SimulationConfig(n_clusters=4, n=24, design=design, replications=0)
    X, cl = generate_design(cfg, 2)
    s2, t2 = _re_params(design, 4)
    Sigma = re_covariance(cl, s2, t2)
    if isinstance(design, SV3):
        Sigma = Sigma + np.diag(0.5 * X[:, 2] ** 2)
    np.testing.assert_allclose(true_covariance(design, X, cl), unvec(true_vec_v(X, Sigma), 3), rtol=1e-12)


def test_sv3_draws_match_covariance():
    cfg = SimulationConfig(n_clusters=2, n=4, design=SV3(1.0, 0.1), replications=0)
    X, cl = generate_design(cfg, 1)
    rng = stream(0, 3)
    R = 60_000
    E = np.array([draw_errors(cfg.design, [2, 2], X[:, 2], rng) for _ in range(R)])
    target = re_covariance(cl, 1.0, 0.1) + np.diag(0.5 * X[:, 2] ** 2)
    se = np.sqrt((np.outer(np.diag(target), np.diag(target)) + target**2) / R)
    assert np.all(np.abs(E.T @ E / R - target) < 4 * se)


def test_zero_replications():
    res = run_study(SimulationConfig(n=280, replications=0, treated=(1, 5)))
    assert len(res.rows) == 2 * 8 * 2
    assert all(math.isnan(r["size"]) and r["n_exists"] == 0 for r in res.rows)


def test_nonexistence_and_counts():
    cfg = SimulationConfig(n=280, replications=20, treated=(1, 2, 7))
    res = run_study(cfg)
    assert res.get("LZIK", 1)["n_exists"] == 0
    assert res.get("LZIK", 1)["size_fig"] == 0.0
    assert res.get("LZIK", 2)["n_exists"] == 20
    for m in ("UV2(RV0)", "UV2(RV1)", "UV3(RV0)", "UV3(RV1)"):
        assert res.get(m, 1)["n_exists"] == 0
        assert res.get(m, 2)["n_exists"] == 0
        assert res.get(m, 7)["n_exists"] == 20
    for r in res.rows:
        assert r["n_exists"] <= r["replications"]
        assert math.isnan(r["size"]) or 0 <= r["size"] <= 1


def test_oracle_method_size():
    cfg = SimulationConfig(n=280, replications=4000, treated=(7,), methods=("ORACLE",), seed=11)
    res = run_study(cfg)
    for coef in ("beta", "gamma"):
        rate = res.get("ORACLE", 7, coef)["size"]
        assert abs(rate - 0.05) < 3 * math.sqrt(0.05 * 0.95 / 4000)


def test_workers_do_not_change_results():
    cfg = SimulationConfig(n=140, n_clusters=7, replications=30, treated=(3,), seed=4)
    a, b = io.StringIO(), io.StringIO()
    run_study(cfg, workers=1).to_csv(a)
    run_study(cfg, workers=3).to_csv(b)
    assert a.getvalue() == b.getvalue()


def test_csv_layout():
    cfg = SimulationConfig(n=140, n_clusters=7, replications=5, treated=(3,), levels=(0.05, 0.1))
    buf = io.StringIO()
    run_study(cfg).to_csv(buf)
    lines = buf.getvalue().split("\r\n")
    assert lines[0].split(",")[:4] == ["method", "C1", "coefficient", "level"]
    assert len([ln for ln in lines if ln]) == 1 + 8 * 2 * 2


# --- resampling ---------------------------------------------------------------


def _dataset(C=51, seed=0):
    rng = np.random.default_rng(seed)
    sizes = rng.permutation(np.arange(2, 2 + C))
    cl = np.repeat(np.arange(C), sizes)
    n = cl.size
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    return ClusteredDataset(rng.normal(size=n), X, cl)


def test_by_size_selection():
    data = _dataset()
    sizes = data.cluster_sizes
    picked = select_clusters(sizes, BySize(3, 11), np.random.default_rng(0))
    assert picked.size == 14
    chosen = sorted(sizes[picked].tolist())
    srt = sorted(sizes.tolist())
    assert chosen == sorted(srt[:11] + srt[-3:])
    out = resample_clusters(data, BySize(3, 11), 0.5, 7, np.random.default_rng(1))
    assert out.n_clusters == 14


def test_resample_identity():
    data = _dataset(C=6)

    rng = np.random.default_rng(3)
    # draw with replacement until every cluster appears exactly once
    while True:
        r = np.random.default_rng(int(rng.integers(1 << 30)))
        s = r.bit_generator.state
        picked = select_clusters(data.cluster_sizes, RandomWithReplacement(6), r)
        if sorted(picked.tolist()) == list(range(6)):
            r.bit_generator.state = s
            break
    out = resample_clusters(data, RandomWithReplacement(6), 1.0, 2, r)
    assert out.n == data.n
    rows_in = sorted(map(tuple, np.column_stack([data.y, data.X])))
    rows_out = sorted(map(tuple, np.column_stack([out.y, out.X[:, :-1]])))
    assert rows_in == rows_out
    policy = out.X[:, -1]
    for c in range(out.n_clusters):
        v = policy[out.cluster_of == c]
        assert np.all(v == v[0])
    assert sum(policy[out.cluster_of == c][0] for c in range(6)) == 2


def test_duplicates_become_distinct():
    data = _dataset(C=3)
    out = resample_clusters(data, RandomWithReplacement(40), 1.0, 1, np.random.default_rng(0))
    assert out.n_clusters == 40


def test_empty_subsample():
    data = _dataset(C=5)
    with pytest.raises(EmptySubsample):
        resample_clusters(data, BySize(0, 5), 0.01, 1, np.random.default_rng(0))
