import numpy as np
import pytest

from rctstream import oracle
from rctstream.bootstrap import BootstrapMeanEnsemble, WeightGenerator, WeightMode, bootstrap_pate_step, summarize
from rctstream.datagen import ClusterSpec, DgpSpec, generate_arrays
from rctstream.types import StreamConfig, StreamError


def test_orthonormal_design_gives_xty():
    gen = np.random.default_rng(1)
    q, _ = np.linalg.qr(gen.normal(size=(30, 3)))
    y = gen.normal(size=30)
    fit = oracle.batch_ols(oracle.RetainedDataset(q, y))
    np.testing.assert_allclose(fit.beta, q.T @ y, atol=1e-12)


def test_residuals_orthogonal_and_ssr():
    data = generate_arrays(DgpSpec(n=2000, k=5, tau=0.3, beta=(1, 2, 3, 4), seed=2))
    fit = oracle.batch_ols(oracle.RetainedDataset(data.X, data.y))
    assert np.abs(data.X.T @ fit.residuals).max() < 1e-9
    assert fit.ssr == pytest.approx(float(fit.residuals @ fit.residuals), rel=1e-15)
    np.testing.assert_allclose(fit.beta, np.linalg.lstsq(data.X, data.y, rcond=None)[0], rtol=1e-9)


def test_singular_design_errors():
    X = np.column_stack([np.ones(5), np.ones(5)])
    with pytest.raises(StreamError):
        oracle.batch_ols(oracle.RetainedDataset(X, np.arange(5.0)))


def test_cluster_sandwich_singletons_equal_hc0_and_permutation():
    data = generate_arrays(DgpSpec(n=400, k=3, tau=1.0, beta=(0.0, 1.0), hetero_factor=2.0, seed=3))
    ids = [b"%d" % i for i in range(400)]
    retained = oracle.RetainedDataset(data.X, data.y, ids)
    np.testing.assert_allclose(oracle.batch_cluster_sandwich(retained), oracle.batch_hc0(retained), rtol=1e-12)
    perm = np.random.default_rng(3).permutation(400)
    shuffled = oracle.RetainedDataset(data.X[perm], data.y[perm], [ids[i] for i in perm])
    np.testing.assert_allclose(oracle.batch_cluster_sandwich(shuffled), oracle.batch_cluster_sandwich(retained), rtol=1e-10)
    with pytest.raises(StreamError):
        oracle.batch_cluster_sandwich(oracle.RetainedDataset(data.X, data.y, [b"a"] * 400))


def test_bootstrap_of_constant_data():
    X = np.column_stack([np.ones(50), np.arange(50) % 2])
    data = oracle.RetainedDataset(X, np.full(50, 3.0))
    reps = oracle.batch_multinomial_bootstrap(data, 200, 1, statistic="ols")
    assert reps[:, 1].var() == pytest.approx(0.0, abs=1e-25)
    with pytest.raises(StreamError):
        oracle.batch_multinomial_bootstrap(data, 1, 1)
    with pytest.raises(StreamError):
        oracle.batch_multinomial_bootstrap(data, 5, 1, statistic="median")


def test_multinomial_agrees_with_online_poisson():
    data = generate_arrays(DgpSpec(n=5000, tau=0.5, beta=(1.0,), seed=4))
    retained = oracle.RetainedDataset(data.X, data.y)
    multi = oracle.batch_multinomial_bootstrap(retained, 500, 4).var(ddof=1)
    ens = BootstrapMeanEnsemble(500)
    gen, cfg = WeightGenerator(4), StreamConfig()
    for r in data.records():
        bootstrap_pate_step(ens, r, gen, cfg)
    assert summarize(ens).variance == pytest.approx(multi, rel=0.15)


def test_cluster_resampling_agrees_with_cluster_seeded_weights():
    data = generate_arrays(DgpSpec(n=4000, tau=0.5, beta=(1.0,), cluster_spec=ClusterSpec(200, 0.3), seed=5))
    retained = oracle.RetainedDataset(data.X, data.y, [data.cluster_ids[j] for j in data.cluster_index])
    multi = oracle.batch_multinomial_bootstrap(retained, 1000, 5, cluster=True).var(ddof=1)
    naive = oracle.batch_multinomial_bootstrap(retained, 1000, 5).var(ddof=1)
    ens = BootstrapMeanEnsemble(1000)
    gen, cfg = WeightGenerator(5, WeightMode.CLUSTER_SEEDED), StreamConfig()
    for r in data.records():
        bootstrap_pate_step(ens, r, gen, cfg)
    assert summarize(ens).variance == pytest.approx(multi, rel=0.20)
    assert multi > 2 * naive


def test_diff_in_means_and_pate_values():
    X = np.column_stack([np.ones(4), [1, 0, 1, 0]])
    data = oracle.RetainedDataset(X, np.array([2.0, 1.0, 4.0, 3.0]))
    assert oracle.diff_in_means(data) == 1.0
    np.testing.assert_array_equal(oracle.pate_values(data, 0.5), [4.0, -2.0, 8.0, -6.0])
