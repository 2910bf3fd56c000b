"""Turn point labels into target distributions.

Three pieces feed the smoothed per-step variance:

* Gaussian-kernel weights between each window and its exact k nearest
  neighbours (KD-tree), used as cross-series/cross-window graph edges;
* the dominant period of the series (argmax of the autocorrelation), used as
  periodic graph edges;
* a sliding-window base variance, smoothed over the graph by solving
  ``(I + lam * L) sigma2 = v_base`` with the Laplacian ``L = D - A``.

The graph lives on the time axis: one node per time step of each series,
series stacked block-diagonally, with KNN edges joining the forecast-origin
nodes of similar windows (possibly across series).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree
from scipy.special import ndtr

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6


class EnhanceError(ValueError):
    pass


class PeriodError(EnhanceError):
    """No meaningful period (e.g. zero-variance input)."""


@dataclass
class EnhanceConfig:
    k_neighbors: int = 5
    kernel_sigma: float | None = None  # None: median KNN distance
    max_lag: int | None = None  # None: min(T // 2, 3 * base_window + 60)
    base_window: int = 7
    lambda_reg: float = 1.0
    n_bins: int = 32
    bin_range: tuple = (-4.0, 4.0)
    period_threshold: float = 0.2
    # "diff": base variance of first differences / sqrt(2) (noise level);
    # "raw": base variance of the labels themselves.
    variance_source: str = "diff"
    target_var_scale: float = 1.0

    def __post_init__(self):
        self.bin_range = tuple(float(v) for v in self.bin_range)
        if self.base_window < 2:
            raise EnhanceError(f"base_window must be >= 2, got {self.base_window}")
        if self.lambda_reg < 0:
            raise EnhanceError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        if self.n_bins < 2 or not self.bin_range[0] < self.bin_range[1]:
            raise EnhanceError(f"bad binning: {self.n_bins} bins on {self.bin_range}")
        if self.kernel_sigma is not None and self.kernel_sigma <= 0:
            raise EnhanceError(f"kernel_sigma must be positive, got {self.kernel_sigma}")
        if self.variance_source not in ("diff", "raw"):
            raise EnhanceError(f"unknown variance_source {self.variance_source!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bin_range"] = list(self.bin_range)
        return d


@dataclass(frozen=True)
class AdjacencyGraph:
    weights: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def degree(self) -> np.ndarray:
        return np.asarray(self.weights.sum(axis=1)).ravel()

    def laplacian(self) -> sp.csr_matrix:
        return (sp.diags(self.degree) - self.weights).tocsr()

    def dirichlet_energy(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(x @ (self.laplacian() @ x))


@dataclass(frozen=True)
class EnhancedTarget:
    mean: float
    variance: float
    categorical: np.ndarray | None = None

    def __post_init__(self):
        if not self.variance > 0:
            raise EnhanceError(f"target variance must be positive, got {self.variance}")


# --------------------------------------------------------------- similarity

def knn_weights(batch, cfg: EnhanceConfig) -> sp.csr_matrix:
    """Symmetrised Gaussian-kernel weights to each row's k exact nearest neighbours."""
    X = np.asarray(batch, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    B = X.shape[0]
    k = cfg.k_neighbors
    if B < 2:
        raise EnhanceError(f"need at least two windows, got {B}")
    if not 1 <= k < B:
        raise EnhanceError(f"k_neighbors={k} must lie in [1, {B - 1}] for a batch of {B}")
    dist, idx = cKDTree(X).query(X, k=k + 1)
    rows = np.repeat(np.arange(B), k)
    cols = np.empty(B * k, dtype=np.int64)
    d = np.empty(B * k)
    for i in range(B):
        # duplicates can push row i out of position 0; drop it wherever it is
        keep = idx[i] != i
        if keep.all():
            keep[-1] = False
        cols[i * k:(i + 1) * k] = idx[i][keep]
        d[i * k:(i + 1) * k] = dist[i][keep]
    sigma = cfg.kernel_sigma
    if sigma is None:
        sigma = float(np.median(d)) if np.median(d) > 0 else 1.0
    w = np.maximum(np.exp(-d * d / (2.0 * sigma * sigma)), np.finfo(float).tiny)
    W = sp.csr_matrix((w, (rows, cols)), shape=(B, B))
    return W.maximum(W.T).tocsr()


# -------------------------------------------------------------- periodicity

def autocorrelation(series, lags) -> np.ndarray:
    """rho(tau) = sum_{t>tau} (x_t - xbar)(x_{t-tau} - xbar) / sum_t (x_t - xbar)^2."""
    x = np.asarray(series, dtype=np.float64)
    xc = x - x.mean()
    denom = float(xc @ xc)
    if denom <= 0.0:
        raise PeriodError("series has zero variance")
    return np.array([float(xc[tau:] @ xc[:x.size - tau]) / denom for tau in lags])


def detect_period(series, max_lag: int, min_lag: int = 2) -> int:
    """Lag in [min_lag, max_lag] with the largest autocorrelation (ties -> smaller lag)."""
    x = np.asarray(series, dtype=np.float64)
    if max_lag < 2 or x.size <= max_lag:
        raise EnhanceError(f"need 2 <= max_lag < T, got max_lag={max_lag}, T={x.size}")
    if not 2 <= min_lag <= max_lag:
        raise EnhanceError(f"need 2 <= min_lag <= max_lag, got min_lag={min_lag}")
    lags = np.arange(min_lag, max_lag + 1)
    rho = autocorrelation(x, lags)
    return int(lags[int(np.argmax(rho))])


def detrend(series, window: int) -> np.ndarray:
    """Subtract a centred moving average (edge-padded) of odd length ``window``."""
    x = np.asarray(series, dtype=np.float64)
    window = min(window | 1, x.size if x.size % 2 else x.size - 1)
    if window < 3:
        return x - x.mean()
    half = window // 2
    padded = np.pad(x, half, mode="edge")
    trend = np.convolve(padded, np.ones(window) / window, mode="valid")
    return x - trend


# ---------------------------------------------------------------- variance

def base_variance(series, window: int) -> np.ndarray:
    """Sample variance over a centred window, floored at 1e-6.

    Near the ends the window is shifted (not truncated) to stay inside the
    series, so every estimate uses ``min(window, T)`` points.
    """
    if window < 2:
        raise EnhanceError(f"window must be >= 2, got {window}")
    x = np.asarray(series, dtype=np.float64)
    T = x.size
    L = min(window, T)
    if L < 2:
        return np.full(T, VARIANCE_FLOOR)
    per_start = np.var(np.lib.stride_tricks.sliding_window_view(x, L), axis=1, ddof=1)
    starts = np.clip(np.arange(T) - (L - 1) // 2, 0, T - L)
    return np.maximum(per_start[starts], VARIANCE_FLOOR)


def build_adjacency(T: int, period: int | None = None, period_weight: float = 1.0,
                    cross_weights=None) -> AdjacencyGraph:
    """Temporal chain + optional periodic links + optional extra (cross) edges.

    Periodic edges (t, t + period) carry ``period_weight`` clamped to [0, 1];
    ``cross_weights`` is a (T, T) matrix added as-is (symmetrised by max).
    """
    if T < 1:
        raise EnhanceError(f"graph needs at least one node, got {T}")
    A = sp.lil_matrix((T, T))
    if T > 1:
        i = np.arange(T - 1)
        A[i, i + 1] = 1.0
    if period is not None:
        if not 2 <= period <= T - 1:
            raise EnhanceError(f"period {period} outside [2, {T - 1}]")
        wp = float(np.clip(period_weight, 0.0, 1.0))
        if wp > 0:
            i = np.arange(T - period)
            A[i, i + period] = A[i, i + period].toarray() + wp
    A = A.tocsr()
    A = A + A.T
    if cross_weights is not None:
        C = sp.csr_matrix(cross_weights)
        if C.shape != (T, T):
            raise EnhanceError(f"cross weights shape {C.shape} != ({T}, {T})")
        if (C.data < 0).any():
            raise EnhanceError("cross weights must be nonnegative")
        C = C.maximum(C.T)
        A = A + C
    A = A.tolil()
    A.setdiag(0.0)
    A = A.tocsr()
    A.eliminate_zeros()
    return AdjacencyGraph(A)


def smooth_variance(v_base, graph: AdjacencyGraph, lam: float) -> np.ndarray:
    """Solve ``(I + lam L) sigma2 = v_base`` directly; floor at 1e-6.

    Constant inputs are returned unchanged (exactly), for any ``lam``.
    """
    v = np.asarray(v_base, dtype=np.float64)
    if lam < 0:
        raise EnhanceError(f"lambda must be >= 0, got {lam}")
    if graph.n != v.size:
        raise EnhanceError(f"graph has {graph.n} nodes but v_base has {v.size} entries")
    if lam == 0:
        return np.maximum(v.copy(), VARIANCE_FLOOR)
    M = (sp.identity(v.size, format="csc") + lam * graph.laplacian()).tocsc()
    # L annihilates constants, so solve for the deviation from a reference level;
    # a constant input then comes back bit-for-bit.
    ref = v[0]
    sigma2 = ref + np.atleast_1d(spsolve(M, v - ref))
    if not np.all(np.isfinite(sigma2)):
        raise RuntimeError("variance smoothing solve failed")
    return np.maximum(sigma2, VARIANCE_FLOOR)


# ----------------------------------------------------------------- targets

def enhance_continuous(labels, variances) -> list[EnhancedTarget]:
    y = np.asarray(labels, dtype=np.float64).ravel()
    v = np.asarray(variances, dtype=np.float64).ravel()
    if y.shape != v.shape:
        raise EnhanceError(f"{y.size} labels vs {v.size} variances")
    return [EnhancedTarget(float(a), float(b)) for a, b in zip(y, v)]


def bin_edges(cfg: EnhanceConfig) -> np.ndarray:
    return np.linspace(cfg.bin_range[0], cfg.bin_range[1], cfg.n_bins + 1)


def bin_centers(cfg: EnhanceConfig) -> np.ndarray:
    e = bin_edges(cfg)
    return 0.5 * (e[:-1] + e[1:])


def discretize(labels, variances, cfg: EnhanceConfig) -> tuple[np.ndarray, int]:
    """Bin masses of N(y, var) over uniform bins, tails folded into the end bins.

    Labels outside ``bin_range`` are moved to the nearest bin centre first;
    the number of such labels is returned alongside the (n, n_bins) masses.
    """
    y = np.asarray(labels, dtype=np.float64)
    v = np.asarray(variances, dtype=np.float64)
    if y.shape != v.shape:
        raise EnhanceError(f"{y.shape} labels vs {v.shape} variances")
    centers = bin_centers(cfg)
    lo, hi = cfg.bin_range
    outside = (y < lo) | (y > hi)
    n_clamped = int(outside.sum())
    if n_clamped:
        y = np.where(y < lo, centers[0], np.where(y > hi, centers[-1], y))
    inner = bin_edges(cfg)[1:-1]
    sd = np.sqrt(v)[..., None]
    cdf = ndtr((inner - y[..., None]) / sd)
    zeros = np.zeros(y.shape + (1,))
    ones = np.ones(y.shape + (1,))
    probs = np.diff(np.concatenate([zeros, cdf, ones], axis=-1), axis=-1)
    probs = np.maximum(probs, 0.0)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs, n_clamped


def enhance_discrete(labels, variances, cfg: EnhanceConfig) -> tuple[list[EnhancedTarget], int]:
    y = np.asarray(labels, dtype=np.float64).ravel()
    v = np.asarray(variances, dtype=np.float64).ravel()
    probs, n_clamped = discretize(y, v, cfg)
    if n_clamped:
        log.warning("%d labels outside bin range %s were clamped", n_clamped, cfg.bin_range)
    return [EnhancedTarget(float(a), float(b), p) for a, b, p in zip(y, v, probs)], n_clamped


# ----------------------------------------------------------------- pipeline

@dataclass
class EnhancementResult:
    variance: np.ndarray  # smoothed sigma^2 per global node
    offsets: dict  # series id -> first global node
    periods: dict = field(default_factory=dict)  # series id -> (period, rho) or None


def default_max_lag(T: int, cfg: EnhanceConfig) -> int:
    if cfg.max_lag is not None:
        return min(cfg.max_lag, T - 1)
    return max(2, min(T // 2, 3 * cfg.base_window + 60))


def first_trough(rho) -> int | None:
    """Smallest lag (>= 2) at which ``rho`` (indexed from lag 1) has a local minimum."""
    rho = np.asarray(rho)
    for i in range(1, rho.size - 1):
        if rho[i] < rho[i - 1] and rho[i] <= rho[i + 1]:
            return i + 1
    return None


def find_period(y, cfg: EnhanceConfig) -> tuple[int, float] | None:
    """Dominant period of a detrended series, or None if weak / undefined.

    The search starts after the first trough of the autocorrelation: near lag
    zero every smooth signal (level shifts, slow drift, a long cycle) is highly
    self-correlated, which would otherwise beat the true period.
    """
    y = np.asarray(y, dtype=np.float64)
    max_lag = default_max_lag(y.size, cfg)
    if y.size < 8 or max_lag < 2:
        return None
    resid = detrend(y, 2 * max_lag + 1)
    try:
        rho = autocorrelation(resid, np.arange(1, max_lag + 1))
    except PeriodError:
        return None
    trough = first_trough(rho)
    if trough is None or trough >= max_lag:
        return None
    p = detect_period(resid, max_lag, min_lag=trough)
    if rho[p - 1] < cfg.period_threshold:
        return None
    return p, float(rho[p - 1])


def enhance_variances(segments: dict, window_vectors, window_nodes, cfg: EnhanceConfig) -> EnhancementResult:
    """Smoothed target variance for every time step of every series.

    segments: series id -> label array (the labelled region of that series).
    window_vectors: (n, D) flattened input windows used for the KNN edges.
    window_nodes: (n,) global node index each window is attached to (its
    forecast origin).
    """
    offsets, total = {}, 0
    for sid, y in segments.items():
        offsets[sid] = total
        total += len(y)
    v_base = np.empty(total)
    periods = {}
    blocks = []
    for sid, y in segments.items():
        y = np.asarray(y, dtype=np.float64)
        src = np.diff(y, prepend=y[0]) / np.sqrt(2.0) if cfg.variance_source == "diff" else y
        if cfg.variance_source == "diff" and y.size > 1:
            src[0] = src[1]
        v_base[offsets[sid]:offsets[sid] + y.size] = base_variance(src, cfg.base_window)
        found = find_period(y, cfg)
        periods[sid] = found
        if found is None:
            blocks.append(build_adjacency(y.size).weights)
        else:
            blocks.append(build_adjacency(y.size, found[0], found[1]).weights)
    A = sp.block_diag(blocks, format="csr")
    X = np.asarray(window_vectors, dtype=np.float64)
    nodes = np.asarray(window_nodes, dtype=np.int64)
    if len(X) > cfg.k_neighbors and cfg.k_neighbors > 0:
        W = knn_weights(X, cfg).tocoo()
        C = sp.csr_matrix((W.data, (nodes[W.row], nodes[W.col])), shape=(total, total))
        A = A + C.maximum(C.T)
    sigma2 = smooth_variance(v_base, AdjacencyGraph(_clean(A)), cfg.lambda_reg)
    sigma2 = np.maximum(sigma2 * cfg.target_var_scale, VARIANCE_FLOOR)
    return EnhancementResult(sigma2, offsets, periods)


def _clean(A) -> sp.csr_matrix:
    A = sp.lil_matrix(A)
    A.setdiag(0.0)
    A = A.tocsr()
    A.eliminate_zeros()
    return A
