"""Scalar Gaussian mixtures, categoricals, and kernel distances between them.

All kernels are the RBF ``k(x, y) = exp(-(x - y)^2 / (2 kappa^2))``.  For two
Gaussians the kernel expectation has the closed form

    E k(x, y) = kappa / sqrt(s^2 + kappa^2) * exp(-(m_x - m_y)^2 / (2 (s^2 + kappa^2)))

with ``s^2 = var_x + var_y``, which makes mixture-vs-mixture MMD exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_BANDWIDTH = 1.0


class DistributionError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianMixture1D:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        m = np.atleast_1d(np.asarray(self.means, dtype=np.float64))
        v = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        if not (g.shape == m.shape == v.shape) or g.ndim != 1:
            raise DistributionError(f"component arrays differ in shape: {g.shape}, {m.shape}, {v.shape}")
        if np.any(g < 0) or abs(g.sum() - 1.0) > 1e-9:
            raise DistributionError(f"weights must be a probability vector, got {g}")
        if np.any(v <= 0):
            raise DistributionError(f"variances must be positive, got {v}")
        object.__setattr__(self, "weights", g)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @classmethod
    def gaussian(cls, mean: float, variance: float) -> "GaussianMixture1D":
        return cls(np.ones(1), np.array([mean]), np.array([variance]))

    def mean(self) -> float:
        return float(self.weights @ self.means)

    def variance(self) -> float:
        """Law of total variance."""
        m = self.mean()
        return float(self.weights @ (self.variances + self.means ** 2) - m * m)

    def cdf(self, x):
        from scipy.special import ndtr
        x = np.asarray(x, dtype=np.float64)[..., None]
        return np.sum(self.weights * ndtr((x - self.means) / np.sqrt(self.variances)), axis=-1)


@dataclass(frozen=True)
class CategoricalDist:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise DistributionError(f"not a probability vector: {p}")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True)
class RFFMap:
    """Random Fourier features for the scalar RBF kernel of width ``bandwidth``."""

    W: np.ndarray  # (D, 1)
    b: np.ndarray  # (D,)
    bandwidth: float

    @property
    def dim(self) -> int:
        return self.b.shape[0]

    @classmethod
    def create(cls, dim: int, bandwidth: float, seed: int = 0) -> "RFFMap":
        if dim < 1 or bandwidth <= 0:
            raise DistributionError(f"need dim >= 1 and bandwidth > 0, got {dim}, {bandwidth}")
        rng = np.random.default_rng(seed)
        W = rng.normal(0.0, 1.0 / bandwidth, size=(dim, 1))
        b = rng.uniform(0.0, 2.0 * np.pi, size=dim)
        return cls(W, b, float(bandwidth))


def gaussian_kernel_expectation(m1, v1, m2, v2, kappa: float):
    """E[k(x, y)] for independent x ~ N(m1, v1), y ~ N(m2, v2); broadcasts."""
    s = np.asarray(v1) + np.asarray(v2) + kappa * kappa
    d = np.asarray(m1) - np.asarray(m2)
    return kappa / np.sqrt(s) * np.exp(-d * d / (2.0 * s))


def mixture_kernel_expectation(P: GaussianMixture1D, Q: GaussianMixture1D, kappa: float) -> float:
    K = gaussian_kernel_expectation(P.means[:, None], P.variances[:, None],
                                    Q.means[None, :], Q.variances[None, :], kappa)
    return float(P.weights @ K @ Q.weights)


def mmd2_closed(P: GaussianMixture1D, Q: GaussianMixture1D, kappa: float) -> float:
    """Exact squared MMD between two scalar Gaussian mixtures, clamped at 0."""
    if not kappa > 0:
        raise DistributionError(f"bandwidth must be positive, got {kappa}")
    pp = mixture_kernel_expectation(P, P, kappa)
    qq = mixture_kernel_expectation(Q, Q, kappa)
    pq = mixture_kernel_expectation(P, Q, kappa)
    return max(pp + qq - 2.0 * pq, 0.0)


def median_bandwidth(samples) -> float:
    """Median of all pairwise absolute differences (unsquared distances).

    Exact.  Repeated values are collapsed first and pairs are weighted by
    multiplicity, so heavily overlapping label sets (e.g. rolling windows) stay
    cheap.  Raises DistributionError when every sample is identical; callers
    then use ``DEFAULT_BANDWIDTH``.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise DistributionError("median bandwidth needs at least two samples")
    u, c = np.unique(x, return_counts=True)
    if u.size == 1:
        raise DistributionError("all samples identical; bandwidth is degenerate")
    iu = np.triu_indices(u.size, k=1)
    d = np.concatenate([[0.0], u[iu[1]] - u[iu[0]]])
    w = np.concatenate([[np.sum(c * (c - 1) // 2)], c[iu[0]] * c[iu[1]]])
    order = np.argsort(d, kind="stable")
    d, cw = d[order], np.cumsum(w[order])
    m = x.size * (x.size - 1) // 2

    def rank(r):  # r-th smallest (0-based) pairwise difference
        return d[np.searchsorted(cw, r, side="right")]

    if m % 2:
        return float(rank(m // 2))
    return float((rank(m // 2 - 1) + rank(m // 2)) / 2)


def bandwidth_or_default(samples, default: float = DEFAULT_BANDWIDTH) -> float:
    try:
        kappa = median_bandwidth(samples)
    except DistributionError:
        return default
    return kappa if kappa > 0 else default


def rff_features(x, fmap: RFFMap) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    return np.sqrt(2.0 / fmap.dim) * np.cos(x @ fmap.W.T + fmap.b)


def mmd2_rff(samples_p, samples_q, fmap: RFFMap) -> float:
    sp = np.asarray(samples_p, dtype=np.float64).ravel()
    sq = np.asarray(samples_q, dtype=np.float64).ravel()
    if sp.size == 0 or sq.size == 0:
        raise DistributionError("both sample sets must be nonempty")
    diff = rff_features(sp, fmap).mean(axis=0) - rff_features(sq, fmap).mean(axis=0)
    return float(diff @ diff)


def kl_categorical(P: CategoricalDist, Q: CategoricalDist, eps: float = 1e-10) -> float:
    p, q = P.probs, Q.probs
    if p.shape != q.shape:
        raise DistributionError(f"length mismatch: {p.size} vs {q.size}")
    mask = p > 0
    return float(max(np.sum(p[mask] * np.log(p[mask] / (q[mask] + eps))), 0.0))


def sample_mixture(P: GaussianMixture1D, n: int, seed=None) -> np.ndarray:
    if n < 1:
        raise DistributionError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    comp = rng.choice(P.weights.size, size=n, p=P.weights)
    return P.means[comp] + np.sqrt(P.variances[comp]) * rng.standard_normal(n)


def mixture_quantiles(weights, means, variances, q, iters: int = 80) -> np.ndarray:
    """Quantile ``q`` of many scalar mixtures at once by bisection.

    weights/means/variances: (..., N) arrays; returns (...,).
    """
    from scipy.special import ndtr
    g = np.asarray(weights, dtype=np.float64)
    m = np.asarray(means, dtype=np.float64)
    sd = np.sqrt(np.asarray(variances, dtype=np.float64))
    lo = np.min(m - 10.0 * sd, axis=-1)
    hi = np.max(m + 10.0 * sd, axis=-1)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        c = np.sum(g * ndtr((mid[..., None] - m) / sd), axis=-1)
        below = c < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)
