"""Synthetic series with known trend / seasonal / changepoint / volatility parts."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .series import TimeSeries

SYNTH_COLUMNS = ["t", "y", "trend_true", "seasonal_true", "cp_true", "noise_sd_true"]


class SpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    """Generator parameters.

    trend_t = slope * t + curvature * t^2 (t in steps); seasonal_t = amplitude *
    sin(2 pi t / period); each changepoint (t_k, shift) adds ``shift`` from t_k
    on.  Noise is N(0, (base_sd * m_j)^2) where the series is cut into
    len(regimes) equal consecutive segments and m_j is segment j's multiplier.
    """

    T: int = 600
    slope: float = 0.01
    curvature: float = 0.0
    period: int = 24
    amplitude: float = 1.0
    changepoints: list = field(default_factory=list)
    base_sd: float = 0.2
    regimes: list = field(default_factory=lambda: [1.0])
    seed: int = 0

    def __post_init__(self):
        self.changepoints = [(int(t), float(s)) for t, s in self.changepoints]
        self.regimes = [float(m) for m in self.regimes]
        if self.T < 1:
            raise SpecError(f"T must be positive, got {self.T}")
        if self.period < 2:
            raise SpecError(f"period must be >= 2, got {self.period}")
        if self.amplitude < 0 or self.base_sd < 0:
            raise SpecError("amplitude and base_sd must be nonnegative")
        if not self.regimes or any(m < 0 for m in self.regimes):
            raise SpecError("regimes must be a nonempty list of nonnegative multipliers")
        for t, _ in self.changepoints:
            if not 0 <= t < self.T:
                raise SpecError(f"changepoint at t={t} outside [0, {self.T})")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown synth fields: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["changepoints"] = [list(c) for c in self.changepoints]
        return d


@dataclass
class SynthSeries:
    t: np.ndarray
    y: np.ndarray
    trend: np.ndarray
    seasonal: np.ndarray
    cp: np.ndarray
    noise_sd: np.ndarray

    def as_series(self, sid: str = "synth") -> TimeSeries:
        return TimeSeries(sid, self.y[:, None], self.t)

    def rows(self):
        return zip(self.t, self.y, self.trend, self.seasonal, self.cp, self.noise_sd)


def synth(spec: SynthSpec) -> SynthSeries:
    t = np.arange(spec.T)
    tf = t.astype(np.float64)
    trend = spec.slope * tf + spec.curvature * tf * tf
    seasonal = spec.amplitude * np.sin(2.0 * np.pi * tf / spec.period)
    cp = np.zeros(spec.T)
    for tk, shift in spec.changepoints:
        cp[tk:] += shift
    seg = np.minimum(t * len(spec.regimes) // spec.T, len(spec.regimes) - 1)
    noise_sd = spec.base_sd * np.asarray(spec.regimes)[seg]
    rng = np.random.default_rng(spec.seed)
    eps = rng.standard_normal(spec.T) * noise_sd
    y = trend + seasonal + cp + eps
    return SynthSeries(t, y, trend, seasonal, cp, noise_sd)


def write_csv(s: SynthSeries, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SYNTH_COLUMNS)
        for t, *vals in s.rows():
            w.writerow([int(t), *(repr(float(v)) for v in vals)])


def read_truth(path: str | Path) -> SynthSeries:
    """Load a CSV written by :func:`write_csv`, ground-truth columns included."""
    data = np.genfromtxt(path, delimiter=",", names=True)
    return SynthSeries(data["t"].astype(np.int64), data["y"], data["trend_true"],
                       data["seasonal_true"], data["cp_true"], data["noise_sd_true"])


def suite_spec(seed: int = 0, T: int = 400) -> SynthSpec:
    """The standard benchmark series: seasonality, two level shifts, two noise regimes."""
    return SynthSpec(T=T, slope=0.01, curvature=0.0, period=12, amplitude=1.0,
                     changepoints=[(int(0.4 * T), 1.5), (int(0.7 * T), -1.0)],
                     base_sd=0.2, regimes=[1.0, 2.0], seed=seed)


def decomposition_spec(seed: int = 0) -> SynthSpec:
    """T=600, period 24, two changepoints, two volatility regimes."""
    return SynthSpec(T=600, slope=0.01, curvature=0.0, period=24, amplitude=1.0,
                     changepoints=[(200, 2.0), (400, -1.5)], base_sd=0.15, regimes=[1.0, 2.5],
                     seed=seed)
