import itertools
import logging
from math import exp, factorial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rctstream import oracle
from rctstream.bootstrap import (
    BootstrapMeanEnsemble,
    BootstrapRlsEnsemble,
    OnlineRlsBootstrap,
    WeightGenerator,
    draw_weights,
    summarize,
    understatement_warning,
    weighted_mean_update,
    weighted_rls_update,
)
from rctstream.datagen import DgpSpec, analytic_pate_variance, generate_arrays
from rctstream.stream import RecursiveMean, pate_transform, rls_init, rls_update
from rctstream.types import Record, StreamConfig, StreamError


def small_rls_start(seed=0, k=3, m=20):
    gen = np.random.default_rng(seed)
    recs = []
    for _ in range(m):
        x = np.concatenate(([1.0, float(gen.integers(0, 2))], gen.normal(size=k - 2)))
        recs.append(Record(float(x.sum() + gen.normal()), x))
    return rls_init(recs)


def test_weighted_mean_examples():
    assert weighted_mean_update(RecursiveMean(4.0, 1.0), -2.0, 2) == RecursiveMean(0.0, 3.0)
    assert weighted_mean_update(RecursiveMean(4.0, 2.0), -2.0, 1) == RecursiveMean(2.0, 3.0)
    assert weighted_mean_update(RecursiveMean(), -2.0, 1) == RecursiveMean(-2.0, 1.0)
    s = RecursiveMean(1.5, 4.0)
    assert weighted_mean_update(s, 100.0, 0) is s
    with pytest.raises(StreamError):
        weighted_mean_update(s, 1.0, -1)


def test_worked_example_replicates():
    cfg = StreamConfig(pi1=0.5)
    ens = BootstrapMeanEnsemble(3)
    ens.update(pate_transform(Record.from_values(2.0, 1), cfg), np.array([1, 2, 0]))
    assert ens.means.tolist() == [4.0, 4.0, 0.0]
    ens.update(pate_transform(Record.from_values(1.0, 0), cfg), np.array([2, 1, 1]))
    assert ens.means.tolist() == [0.0, 2.0, -2.0]


def test_all_zero_weights_leave_ensemble():
    ens = BootstrapMeanEnsemble(4)
    ens.update(3.0, np.array([1, 0, 2, 1]))
    before = (ens.means.copy(), ens.weight_sums.copy())
    ens.update(-50.0, np.zeros(4, dtype=int))
    np.testing.assert_array_equal(ens.means, before[0])
    np.testing.assert_array_equal(ens.weight_sums, before[1])


@given(st.lists(st.tuples(st.floats(-100, 100), st.integers(0, 4)), min_size=1, max_size=40))
def test_weighted_mean_matches_weighted_average(pairs):
    s = RecursiveMean()
    for z, w in pairs:
        s = weighted_mean_update(s, z, w)
    total = sum(w for _, w in pairs)
    assert s.weight_sum == total
    if total:
        expected = sum(z * w for z, w in pairs) / total
        assert s.mean == pytest.approx(expected, rel=1e-9, abs=1e-9)


def test_weighted_rls_unit_weight_is_rls_update():
    st0 = small_rls_start(1)
    r = Record(0.3, [1.0, 1.0, -0.4])
    beta, z = weighted_rls_update(st0.beta, st0.z_inv, r, 1)
    ref = rls_update(st0, r)
    np.testing.assert_allclose(beta, ref.beta, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(z, ref.z_inv, rtol=1e-13, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5), st.floats(-2, 2))
def test_weight_two_equals_two_unit_updates(seed, y, c):
    st0 = small_rls_start(seed)
    r = Record(y, [1.0, float(seed % 2), c])
    b2, z2 = weighted_rls_update(st0.beta, st0.z_inv, r, 2)
    b1, z1 = weighted_rls_update(st0.beta, st0.z_inv, r, 1)
    b1, z1 = weighted_rls_update(b1, z1, r, 1)
    np.testing.assert_allclose(b2, b1, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(z2, z1, rtol=1e-10, atol=1e-12)


def test_weighted_rls_equals_weighted_least_squares():
    # replicate fit = WLS over (start records weight 1) + (later records weight w)
    gen = np.random.default_rng(3)
    X = np.column_stack([np.ones(40), gen.integers(0, 2, 40), gen.normal(size=40)])
    y = X @ [1.0, 0.5, -1.0] + gen.normal(size=40)
    w = np.concatenate([np.ones(10), gen.poisson(1.0, 30)])
    st0 = rls_init([Record(y[i], X[i]) for i in range(10)])
    beta, z = st0.beta, st0.z_inv
    for i in range(10, 40):
        beta, z = weighted_rls_update(beta, z, Record(y[i], X[i]), int(w[i]))
    gram = X.T @ (w[:, None] * X)
    np.testing.assert_allclose(beta, np.linalg.solve(gram, X.T @ (w * y)), rtol=1e-10)
    np.testing.assert_allclose(z, np.linalg.inv(gram), rtol=1e-10)


def test_vectorized_ensemble_matches_scalar_replicates():
    st0 = small_rls_start(4)
    ens = BootstrapRlsEnsemble(st0, 6)
    reps = [(st0.beta, st0.z_inv)] * 6
    gen = np.random.default_rng(4)
    for _ in range(50):
        r = Record(float(gen.normal()), [1.0, float(gen.integers(0, 2)), float(gen.normal())])
        w = gen.poisson(1.0, 6)
        ens.update(r, w)
        reps = [weighted_rls_update(b, z, r, int(wb)) for (b, z), wb in zip(reps, w)]
    for b in range(6):
        np.testing.assert_allclose(ens.betas[b], reps[b][0], rtol=1e-12)
        np.testing.assert_allclose(ens.z_mats[b], reps[b][1], rtol=1e-12, atol=1e-15)


def test_shared_start_consumes_first_records_unweighted():
    cfg = StreamConfig(k=2, init_m=5)
    boot = OnlineRlsBootstrap(cfg, 8, WeightGenerator(1))
    for i in range(5):
        boot.update(Record.from_values(float(i), i % 2))
    assert boot.ensemble is not None and boot.ensemble.m == 5
    assert np.all(boot.ensemble.weight_sums == 0)
    assert np.all(boot.ensemble.betas == boot.ensemble.betas[0])
    assert boot.init_fraction == 1.0


def test_m_equals_n_gives_zero_variance():
    cfg = StreamConfig(k=2, init_m=6)
    boot = OnlineRlsBootstrap(cfg, 10, WeightGenerator(2))
    for i in range(6):
        boot.update(Record.from_values(float(i * i), i % 2))
    s = summarize(boot.ensemble)
    np.testing.assert_array_equal(s.variance, 0.0)
    assert s.B_effective == 10


def test_small_n_matches_exact_bootstrap_enumeration():
    # For n=3 the Poisson-weighted mean conditional on total weight > 0 can be
    # checked against exhaustive enumeration of weight triples.
    zs = [4.0, -2.0, 1.0]
    ens = BootstrapMeanEnsemble(200_000)
    gen = np.random.default_rng(8)
    for z in zs:
        ens.update(z, gen.poisson(1.0, ens.B))
    p = lambda w: exp(-1.0) / factorial(w)
    m1 = m2 = mass = 0.0
    for ws in itertools.product(range(12), repeat=3):
        if sum(ws) == 0:
            continue
        pr = p(ws[0]) * p(ws[1]) * p(ws[2])
        mean = sum(w * z for w, z in zip(ws, zs)) / sum(ws)
        mass += pr
        m1 += pr * mean
        m2 += pr * mean * mean
    exact_var = m2 / mass - (m1 / mass) ** 2
    est = ens.estimates()
    assert est.mean() == pytest.approx(m1 / mass, abs=0.02)
    assert est.var(ddof=1) == pytest.approx(exact_var, rel=0.02)


def test_summary_edge_cases():
    ens = BootstrapMeanEnsemble(5)
    ens.update(2.0, np.ones(5, dtype=int))
    s = summarize(ens)
    assert s.variance == 0.0 and s.ci_low == s.ci_high == 2.0
    with pytest.raises(StreamError):
        summarize(BootstrapMeanEnsemble(1))
    lonely = BootstrapMeanEnsemble(4)
    lonely.update(1.0, np.array([1, 0, 0, 0]))
    with pytest.raises(StreamError):
        summarize(lonely)
    with pytest.raises(StreamError):
        summarize(ens, level=1.0)


def test_summary_ci_brackets_median():
    ens = BootstrapMeanEnsemble(500)
    gen = np.random.default_rng(5)
    for z in gen.normal(size=300):
        ens.update(float(z), gen.poisson(1.0, 500))
    s = summarize(ens, level=0.9)
    assert s.ci_low <= s.center <= s.ci_high
    assert s.variance >= 0


def test_mean_bootstrap_variance_close_to_analytic():
    spec = DgpSpec(n=2000, tau=1.0, beta=(0.5,), seed=31)
    data = generate_arrays(spec)
    cfg = StreamConfig(pi1=0.5)
    ens = BootstrapMeanEnsemble(1000)
    gen = WeightGenerator(31)
    for i, r in enumerate(data.records()):
        ens.update(pate_transform(r, cfg), draw_weights(gen, i, None, 1000))
    assert summarize(ens).variance == pytest.approx(analytic_pate_variance(spec) / spec.n, rel=0.15)


def test_understatement_shrinks_as_start_fraction_falls():
    data = generate_arrays(DgpSpec(n=1000, tau=0.5, beta=(1.0,), seed=41))
    X, y = data.X, data.y
    ref = oracle.batch_multinomial_bootstrap(oracle.RetainedDataset(X, y), 2000, 41, statistic="ols")
    ref_var = ref[:, 1].var(ddof=1)
    ratios = []
    for m in (500, 100, 20):
        boot = OnlineRlsBootstrap(StreamConfig(k=2, init_m=m), 2000, WeightGenerator(41))
        for r in data.records():
            boot.update(r)
        ratios.append(summarize(boot.ensemble).variance[1, 1] / ref_var)
    assert ratios[0] < ratios[1] < ratios[2]
    assert ratios[0] < 0.8
    assert abs(ratios[2] - 1.0) < 0.15


def test_understatement_warning(caplog):
    with caplog.at_level(logging.WARNING):
        w = understatement_warning(50, 1000)
    assert w["code"] == "BOOTSTRAP_INIT_UNDERSTATES_VARIANCE"
    assert w["m_over_n"] == pytest.approx(0.05)
    assert "understated" in caplog.text
    assert understatement_warning(0, 10) is None
