import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaknn.datastore import NeighborList
from adaknn.knn import (
    VanillaConfig,
    interpolate,
    knn_distribution,
    knn_prefix_distributions,
    uniform_predict,
    vanilla_predict,
)


def nl(distances, values):
    return NeighborList(np.asarray(distances, float), np.asarray(values), np.arange(len(values)))


def direct_formula(distances, values, T, vocab):
    """Unstabilized scalar evaluation, one token at a time."""
    out = []
    z = sum(math.exp(-d / T) for d in distances)
    for tok in range(vocab):
        out.append(sum(math.exp(-d / T) for d, v in zip(distances, values) if v == tok) / z)
    return out


def test_single_neighbor():
    p = knn_distribution(nl([0.7], [3]), 1.0, 5)
    assert p.tolist() == [0, 0, 0, 1.0, 0]


def test_symmetric_pair():
    p = knn_distribution(nl([1.2, 1.2], [1, 2]), 3.0, 4)
    assert p[1] == pytest.approx(0.5) and p[2] == pytest.approx(0.5)


def test_two_point_values():
    # 1/(1+e^-1) and e^-1/(1+e^-1)
    p = knn_distribution(nl([0.0, 1.0], [7, 9]), 1.0, 10)
    assert p[7] == pytest.approx(0.731059, abs=1e-5)
    assert p[9] == pytest.approx(0.268941, abs=1e-5)


def test_empty_and_bad_temperature():
    with pytest.raises(ValueError):
        knn_distribution(nl([], []), 1.0, 3)
    with pytest.raises(ValueError):
        knn_distribution(nl([1.0], [0]), 0.0, 3)


def test_large_distances_are_stable():
    p = knn_distribution(nl([1e4, 1e4 + 1.0], [0, 1]), 1.0, 2)
    assert np.all(np.isfinite(p)) and p.sum() == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0, 50), st.integers(0, 7)), min_size=1, max_size=16),
    st.floats(0.5, 20),
)
def test_matches_direct_formula(pairs, T):
    d = sorted(x for x, _ in pairs)
    v = [t for _, t in pairs]
    p = knn_distribution(nl(d, v), T, 8)
    np.testing.assert_allclose(p, direct_formula(d, v, T, 8), atol=1e-9)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert set(np.flatnonzero(p).tolist()) == set(v)


def test_low_temperature_limit():
    p = knn_distribution(nl([0.1, 0.2, 0.3], [4, 5, 5]), 1e-4, 6)
    assert p[4] >= 1 - 1e-6


def test_high_temperature_limit():
    values = [1, 2, 2, 3, 3, 3]
    p = knn_distribution(nl([0.0, 1.0, 2.0, 3.0, 4.0, 5.0], values), 1e6, 5)
    freq = np.bincount(values, minlength=5) / len(values)
    assert 0.5 * np.abs(p - freq).sum() < 1e-4


def test_prefix_batch_matches_single():
    rng = np.random.default_rng(0)
    d = np.sort(rng.uniform(0, 5, size=(30, 8)), axis=1)
    v = rng.integers(0, 6, size=(30, 8))
    out = knn_prefix_distributions(d, v, [0, 1, 2, 4, 8], 2.0, 6)
    assert np.all(out[:, 0] == 0)
    for n in range(30):
        for j, k in enumerate([1, 2, 4, 8], start=1):
            np.testing.assert_allclose(out[n, j], knn_distribution(nl(d[n, :k], v[n, :k]), 2.0, 6), atol=1e-12)


def test_interpolate_endpoints():
    p_knn = np.array([0.1, 0.9])
    p_nmt = np.array([0.6, 0.4])
    assert interpolate(p_knn, p_nmt, 0.0).tolist() == p_nmt.tolist()
    assert interpolate(p_knn, p_nmt, 1.0).tolist() == p_knn.tolist()


def test_interpolate_value():
    np.testing.assert_allclose(interpolate([1.0, 0.0], [0.2, 0.8], 0.7), [0.76, 0.24], atol=1e-12)


def test_interpolate_errors():
    with pytest.raises(ValueError, match="vocab"):
        interpolate([1.0, 0.0], [1.0, 0.0, 0.0], 0.5)
    with pytest.raises(ValueError):
        interpolate([1.0], [1.0], 1.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_interpolate_is_valid_and_argmax_at_ends(seed, lam):
    rng = np.random.default_rng(seed)
    a, b = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
    out = interpolate(a, b, lam)
    assert np.all(out >= 0) and abs(out.sum() - 1) < 1e-9
    assert np.argmax(interpolate(a, b, 0.0)) == np.argmax(b)
    assert np.argmax(interpolate(a, b, 1.0)) == np.argmax(a)


def test_vanilla_config_validation():
    with pytest.raises(ValueError):
        VanillaConfig(0, 1.0, 0.5)
    with pytest.raises(ValueError):
        VanillaConfig(1, -1.0, 0.5)
    with pytest.raises(ValueError):
        VanillaConfig(1, 1.0, 1.5)


def test_vanilla_degenerate_cases():
    base = np.array([0.5, 0.3, 0.2, 0.0])
    neighbors = nl([0.0, 1.0, 2.0], [3, 1, 1])
    assert vanilla_predict(base, neighbors, VanillaConfig(3, 1.0, 0.0)).tolist() == base.tolist()
    assert vanilla_predict(base, neighbors, VanillaConfig(1, 1.0, 1.0)).tolist() == [0, 0, 0, 1.0]


def test_vanilla_composite():
    base = np.array([0.25, 0.25, 0.25, 0.25])
    neighbors = nl([0.0, 1.0, 5.0], [2, 3, 0])
    out = vanilla_predict(base, neighbors, VanillaConfig(2, 1.0, 0.5))
    # kNN distribution over the first two neighbors, then an even mix with the base
    p2 = 1 / (1 + math.exp(-1))
    want = [0.125, 0.125, 0.5 * p2 + 0.125, 0.5 * (1 - p2) + 0.125]
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_vanilla_needs_k_neighbors():
    with pytest.raises(ValueError):
        vanilla_predict(np.ones(3) / 3, nl([0.0], [1]), VanillaConfig(2, 1.0, 0.5))


def test_uniform_k1():
    base = np.array([0.2, 0.8, 0.0])
    out = uniform_predict(base, nl([0.3], [2]), 1, 1.0)
    np.testing.assert_allclose(out, 0.5 * base + 0.5 * np.array([0, 0, 1.0]))


def test_uniform_fixed_point():
    base = np.array([0.0, 0.0, 1.0])
    out = uniform_predict(base, nl([0.1, 0.2, 0.5, 0.9], [2, 2, 2, 2]), 4, 1.0)
    np.testing.assert_allclose(out, base, atol=1e-15)


def test_uniform_requires_power_of_two():
    with pytest.raises(ValueError):
        uniform_predict(np.ones(2) / 2, nl([0.0, 1.0, 2.0], [0, 1, 0]), 3, 1.0)
