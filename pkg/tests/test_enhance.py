import numpy as np
import pytest
import scipy.sparse as sp
from scipy.special import ndtr

from ldlmoe.enhance import (AdjacencyGraph, EnhanceConfig, EnhanceError, PeriodError,
                            autocorrelation, base_variance, bin_centers, bin_edges, build_adjacency,
                            detect_period, discretize, enhance_continuous, enhance_variances,
                            find_period, first_trough, knn_weights, smooth_variance)


def brute_knn(X, k):
    d = np.linalg.norm(X[:, None] - X[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def test_knn_matches_brute_force(rng):
    X = rng.normal(size=(40, 6))
    W = knn_weights(X, EnhanceConfig(k_neighbors=4, kernel_sigma=1.0)).toarray()
    nn = brute_knn(X, 4)
    for i in range(len(X)):
        for j in nn[i]:
            d2 = np.sum((X[i] - X[j]) ** 2)
            assert W[i, j] == pytest.approx(np.exp(-d2 / 2.0), rel=1e-12)
    np.testing.assert_array_equal(W, W.T)
    assert np.all(np.diag(W) == 0)


def test_knn_kernel_values():
    X = np.array([[0.0], [np.sqrt(2.0)], [10.0]])
    W = knn_weights(X, EnhanceConfig(k_neighbors=1, kernel_sigma=1.0)).toarray()
    assert W[0, 1] == pytest.approx(np.exp(-1.0))
    X = np.array([[1.0, 2.0], [1.0, 2.0], [5.0, 5.0]])
    W = knn_weights(X, EnhanceConfig(k_neighbors=1, kernel_sigma=1.0)).toarray()
    assert W[0, 1] == 1.0


def test_knn_two_points():
    W = knn_weights(np.array([[0.0], [1.0]]), EnhanceConfig(k_neighbors=1, kernel_sigma=1.0))
    assert W.nnz == 2


def test_knn_bad_k():
    with pytest.raises(EnhanceError):
        knn_weights(np.zeros((3, 2)), EnhanceConfig(k_neighbors=3))


def test_autocorrelation_formula(rng):
    x = rng.normal(size=50)
    xc = x - x.mean()
    rho = autocorrelation(x, [3])[0]
    assert rho == pytest.approx(np.sum(xc[3:] * xc[:-3]) / np.sum(xc * xc))


def test_detect_period_sine():
    t = np.arange(120)
    assert detect_period(np.sin(2 * np.pi * t / 12), 40) == 12


def test_detect_period_noise_is_weak():
    x = np.random.default_rng(0).normal(size=300)
    p = detect_period(x, 40)
    assert autocorrelation(x, [p])[0] < 0.2


def test_detect_period_errors():
    with pytest.raises(PeriodError):
        detect_period(np.ones(50), 10)
    with pytest.raises(EnhanceError):
        detect_period(np.arange(10.0), 10)
    with pytest.raises(EnhanceError):
        detect_period(np.arange(50.0), 10, min_lag=11)


def test_first_trough():
    assert first_trough([0.9, 0.5, 0.1, 0.3, 0.8]) == 3
    assert first_trough([0.9, 0.8, 0.7]) is None


def test_find_period_survives_level_shifts():
    t = np.arange(500)
    y = 0.01 * t + np.sin(2 * np.pi * t / 24) + 2.0 * (t >= 200) - 1.5 * (t >= 400)
    y = y + np.random.default_rng(1).normal(0, 0.15, t.size)
    p, rho = find_period(y, EnhanceConfig())
    assert p == 24 and rho > 0.2


def test_find_period_none_for_noise():
    assert find_period(np.random.default_rng(2).normal(size=400), EnhanceConfig()) is None


def test_base_variance_cases():
    np.testing.assert_array_equal(base_variance(np.full(10, 4.0), 3), 1e-6)
    x = np.array([0, 2, 0, 2, 0, 2.0])
    np.testing.assert_allclose(base_variance(x, 2), 2.0)  # var of {0,2}, ddof=1
    y = np.array([1.0, 4.0, 2.0])
    np.testing.assert_allclose(base_variance(y, 10), np.var(y, ddof=1))


def test_adjacency_construction():
    g = build_adjacency(3)
    np.testing.assert_array_equal(g.degree, [1, 2, 1])
    A = build_adjacency(6, period=3).weights.toarray()
    for i in range(3):
        assert A[i, i + 3] == 1.0 and A[i + 3, i] == 1.0
    with pytest.raises(EnhanceError):
        build_adjacency(6, period=6)


def test_smoothing_identity_and_constant(rng):
    g = build_adjacency(20, period=5, period_weight=0.6)
    v = rng.uniform(0.1, 2, 20)
    np.testing.assert_array_equal(smooth_variance(v, g, 0.0), v)
    np.testing.assert_array_equal(smooth_variance(np.full(20, 0.7), g, 3.0), 0.7)


def test_smoothing_hand_case():
    g = build_adjacency(3)
    out = smooth_variance([0.0, 3.0, 0.0], g, 1.0)
    L = np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1.0]])
    dense = np.linalg.solve(np.eye(3) + L, [0, 3, 0.0])
    np.testing.assert_allclose(dense, [0.75, 1.5, 0.75], atol=1e-14)
    np.testing.assert_allclose(out, dense, atol=1e-10)


def test_smoothing_reduces_dirichlet_energy(rng):
    for _ in range(20):
        n = int(rng.integers(5, 30))
        A = sp.random(n, n, density=0.3, random_state=rng)
        g = AdjacencyGraph(sp.csr_matrix(A.maximum(A.T) - sp.diags(A.diagonal())))
        v = rng.uniform(0.01, 3, n)
        s = smooth_variance(v, g, float(rng.uniform(0.1, 5)))
        assert g.dirichlet_energy(s) <= g.dirichlet_energy(v) + 1e-12


def test_smoothing_errors():
    with pytest.raises(EnhanceError):
        smooth_variance([1.0, 2.0], build_adjacency(3), 1.0)
    with pytest.raises(EnhanceError):
        smooth_variance([1.0, 2.0], build_adjacency(2), -1.0)


def test_continuous_targets():
    out = enhance_continuous([5.0, 1.0, 2.0], [1.0, 1e-6, 0.5])
    assert (out[0].mean, out[0].variance) == (5.0, 1.0)
    assert [t.mean for t in out] == [5.0, 1.0, 2.0]
    assert out[1].variance == 1e-6


def test_discretize_cdf_oracle():
    cfg = EnhanceConfig(n_bins=10, bin_range=(-5.0, 5.0))
    p, n = discretize(np.array([0.0]), np.array([1.0]), cfg)
    e = bin_edges(cfg)
    cdf = ndtr(e)
    cdf[0], cdf[-1] = 0.0, 1.0
    np.testing.assert_allclose(p[0], np.diff(cdf), atol=1e-12)
    assert n == 0


def test_discretize_limits():
    cfg = EnhanceConfig(n_bins=8, bin_range=(-4.0, 4.0))
    c = bin_centers(cfg)
    p, _ = discretize(np.array([c[3]]), np.array([1e-12]), cfg)
    np.testing.assert_allclose(p[0], np.eye(8)[3], atol=1e-12)
    p, _ = discretize(np.array([0.0]), np.array([0.3]), cfg)
    np.testing.assert_allclose(p[0], p[0][::-1], atol=1e-14)
    _, n = discretize(np.array([9.0, -9.0, 0.0]), np.ones(3), cfg)
    assert n == 2


def test_enhance_pipeline_shapes(rng):
    y = np.sin(2 * np.pi * np.arange(200) / 12) + rng.normal(0, 0.1, 200)
    X = rng.normal(size=(50, 20))
    res = enhance_variances({"a": y}, X, np.arange(50) + 20, EnhanceConfig())
    assert res.variance.shape == (200,)
    assert np.all(res.variance >= 1e-6)
    assert res.periods["a"][0] == 12
