import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rctstream import rng
from rctstream.bootstrap import WeightGenerator, WeightMode, draw_weights
from rctstream.types import StreamError

u64 = st.integers(min_value=0, max_value=2**64 - 1)


def test_mix64_known_value():
    # first output of splitmix64 seeded with 0
    assert rng.mix64(0) == 0xE220A8397B1DCDAF


@given(st.lists(u64, min_size=1, max_size=20))
def test_mix64_array_matches_scalar(xs):
    arr = rng.mix64_array(np.array(xs, dtype=np.uint64))
    assert [int(v) for v in arr] == [rng.mix64(x) for x in xs]


def test_fnv1a64_vectors():
    assert rng.fnv1a64(b"") == 0xCBF29CE484222325
    assert rng.fnv1a64(b"a") == 0xAF63DC4C8601EC8C


@settings(max_examples=50)
@given(u64, st.integers(1, 64))
def test_poisson_vectorized_matches_reference(key, B):
    assert rng.poisson1(key, B).tolist() == rng.poisson1_reference(key, B)


def test_poisson_moments():
    draws = np.concatenate([rng.poisson1(rng.derive_key(7, i), 1000) for i in range(1000)])
    assert abs(draws.mean() - 1.0) < 0.01
    assert abs(draws.var() - 1.0) < 0.01
    assert draws.min() >= 0


def test_uniforms_in_range_and_deterministic():
    a = rng.uniforms(123, 0, 5000)
    assert np.all((a >= 0.0) & (a < 1.0))
    np.testing.assert_array_equal(a, rng.uniforms(123, 0, 5000))
    np.testing.assert_array_equal(a[100:200], rng.uniforms(123, 100, 100))
    assert np.all(rng.uniforms_open(9, 5000) > 0.0)


def test_cluster_seeded_weights_ignore_position():
    gen = WeightGenerator(2024, WeightMode.CLUSTER_SEEDED)
    w1 = draw_weights(gen, 0, b"u42", 200)
    w2 = draw_weights(gen, 9999, b"u42", 200)
    np.testing.assert_array_equal(w1, w2)
    assert not np.array_equal(w1, draw_weights(gen, 0, b"u43", 200))


def test_iid_weights_depend_on_position_and_seed():
    gen = WeightGenerator(5)
    a = draw_weights(gen, 0, None, 200)
    np.testing.assert_array_equal(a, draw_weights(gen, 0, None, 200))
    assert not np.array_equal(a, draw_weights(gen, 1, None, 200))
    assert not np.array_equal(a, draw_weights(WeightGenerator(6), 0, None, 200))


def test_cluster_mode_requires_id():
    with pytest.raises(StreamError):
        draw_weights(WeightGenerator(1, WeightMode.CLUSTER_SEEDED), 0, None, 10)
    with pytest.raises(StreamError):
        draw_weights(WeightGenerator(1), 0, None, 0)


def test_standard_normals_moments():
    z = rng.standard_normals(rng.derive_key(3, 4), 200_001)
    assert z.size == 200_001
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01
