"""Time-series containers, windowing, chronological splits, scaling, metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SeriesError(ValueError):
    """Raised for malformed series data or impossible windowing/splits."""


@dataclass(frozen=True)
class TimeSeries:
    """One (possibly multivariate) series; the forecast target is column ``target``.

    values has shape (T, d).  Timestamps default to 0..T-1.
    """

    id: str
    values: np.ndarray
    timestamps: np.ndarray | None = None
    target: int = -1

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise SeriesError(f"series {self.id!r}: values must be (T>=1, d>=1), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise SeriesError(f"series {self.id!r}: values contain NaN or infinity")
        object.__setattr__(self, "values", v)
        if self.timestamps is None:
            object.__setattr__(self, "timestamps", np.arange(v.shape[0]))
        else:
            ts = np.asarray(self.timestamps, dtype=np.int64)
            if ts.shape != (v.shape[0],):
                raise SeriesError(f"series {self.id!r}: {ts.shape[0]} timestamps for {v.shape[0]} rows")
            if np.any(np.diff(ts) <= 0):
                raise SeriesError(f"series {self.id!r}: timestamps must be strictly increasing")
            object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def y(self) -> np.ndarray:
        return self.values[:, self.target]


@dataclass(frozen=True)
class WindowedDataset:
    """Rolling (input window, target horizon) pairs.

    ``starts[k]`` is the series row where input k begins; its targets occupy
    rows ``starts[k] + w .. starts[k] + w + H - 1`` of series ``series_ids[k]``.
    ``lengths`` maps series id to its row count.
    """

    inputs: np.ndarray  # (n, w, d)
    targets: np.ndarray  # (n, H)
    w: int
    H: int
    starts: np.ndarray
    series_ids: tuple = ()
    lengths: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise SeriesError(f"{len(self.inputs)} inputs vs {len(self.targets)} targets")

    def __len__(self):
        return len(self.targets)

    @property
    def target_starts(self) -> np.ndarray:
        return self.starts + self.w

    def subset(self, idx) -> "WindowedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowedDataset(self.inputs[idx], self.targets[idx], self.w, self.H,
                               self.starts[idx], tuple(self.series_ids[i] for i in idx),
                               dict(self.lengths))

    @staticmethod
    def concat(parts: list["WindowedDataset"]) -> "WindowedDataset":
        if not parts:
            raise SeriesError("nothing to concatenate")
        w, H = parts[0].w, parts[0].H
        lengths = {}
        for p in parts:
            lengths.update(p.lengths)
        return WindowedDataset(np.concatenate([p.inputs for p in parts]),
                               np.concatenate([p.targets for p in parts]), w, H,
                               np.concatenate([p.starts for p in parts]),
                               tuple(s for p in parts for s in p.series_ids), lengths)


@dataclass(frozen=True)
class SplitSpec:
    test_len: int
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise SeriesError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.test_len < 1:
            raise SeriesError(f"test_len must be positive, got {self.test_len}")


def make_windows(series: TimeSeries, w: int, H: int) -> WindowedDataset:
    T = len(series)
    if w < 1 or H < 1:
        raise SeriesError(f"window and horizon must be positive, got w={w}, H={H}")
    if T < w + H:
        raise SeriesError(f"series {series.id!r} has {T} steps; need at least w + H = {w + H}")
    n = T - w - H + 1
    starts = np.arange(n)
    view = np.lib.stride_tricks.sliding_window_view(series.values, w, axis=0)  # (T-w+1, d, w)
    inputs = np.ascontiguousarray(np.swapaxes(view[:n], 1, 2))
    y = series.y
    targets = np.lib.stride_tricks.sliding_window_view(y[w:], H)[:n].copy()
    return WindowedDataset(inputs, targets, w, H, starts, (series.id,) * n, {series.id: T})


def time_split(ds: WindowedDataset, spec: SplitSpec) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Chronological train/val/test split, applied per series.

    Test holds every pair whose target range touches the final ``test_len``
    rows of its series; the remaining pairs are split with the last
    ``val_fraction`` (rounded) going to validation.
    """
    if spec.test_len < ds.H:
        raise SeriesError(f"test_len {spec.test_len} shorter than horizon {ds.H}")
    parts = {"train": [], "val": [], "test": []}
    ids = np.asarray(ds.series_ids, dtype=object)
    for sid in dict.fromkeys(ds.series_ids):
        T = ds.lengths[sid]
        if spec.test_len >= T:
            raise SeriesError(f"test_len {spec.test_len} does not fit series {sid!r} of length {T}")
        idx = np.flatnonzero(ids == sid)
        idx = idx[np.argsort(ds.starts[idx], kind="stable")]
        last_target = ds.starts[idx] + ds.w + ds.H - 1
        in_test = last_target >= T - spec.test_len
        rest = idx[~in_test]
        n_val = int(round(len(rest) * spec.val_fraction))
        parts["test"].append(idx[in_test])
        parts["val"].append(rest[len(rest) - n_val:])
        parts["train"].append(rest[:len(rest) - n_val])
    out = []
    for name in ("train", "val", "test"):
        sel = np.concatenate(parts[name])
        if len(sel) == 0:
            raise SeriesError(f"{name} partition is empty")
        out.append(ds.subset(sel))
    return tuple(out)


@dataclass(frozen=True)
class Scaler:
    """Per-feature z-score; zero-variance features keep std 1."""

    mean: np.ndarray
    std: np.ndarray
    target: int = -1

    def transform(self, ds: WindowedDataset) -> WindowedDataset:
        return WindowedDataset((ds.inputs - self.mean) / self.std,
                               (ds.targets - self.mean[self.target]) / self.std[self.target],
                               ds.w, ds.H, ds.starts, ds.series_ids, dict(ds.lengths))

    def transform_target(self, y):
        return (np.asarray(y) - self.mean[self.target]) / self.std[self.target]

    def inverse_target(self, z):
        return np.asarray(z) * self.std[self.target] + self.mean[self.target]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "target": self.target}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   int(d.get("target", -1)))


def zscore_fit_transform(train: WindowedDataset, target: int = -1) -> tuple[WindowedDataset, Scaler]:
    """Fit on the training inputs only (population std) and transform.

    Note the scaler is not idempotent: applying it to already-scaled data
    shifts and rescales again.
    """
    if len(train) == 0:
        raise SeriesError("cannot fit a scaler on an empty dataset")
    flat = train.inputs.reshape(-1, train.inputs.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    const = std == 0
    std[const] = 1.0
    mean[const] = 0.0
    scaler = Scaler(mean, std, target)
    return scaler.transform(train), scaler


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise SeriesError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise SeriesError("metrics need at least one value")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def mape(pred, truth, eps: float = 1e-8) -> float:
    """Mean absolute percentage error in percent; |truth| floored at ``eps``."""
    p, t = _pair(pred, truth)
    return float(100.0 * np.mean(np.abs(p - t) / np.maximum(np.abs(t), eps)))


def read_csv(path: str | Path) -> list[TimeSeries]:
    """Load series from a CSV with a header.

    Recognised columns: ``series_id`` (optional, long format), ``t``
    (optional integer timestamps), ``f_*`` feature columns, and ``y``.
    Inputs are the ``f_*`` columns followed by ``y``; other columns are ignored.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SeriesError(f"{path}: empty file or missing header")
        cols = [c.strip() for c in reader.fieldnames]
        if "y" not in cols:
            raise SeriesError(f"{path}: missing required column 'y'")
        feats = sorted((c for c in cols if c.startswith("f_")), key=_feature_key)
        rows: dict[str, list] = {}
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): v for k, v in row.items() if k is not None}
            sid = row.get("series_id") or path.stem
            try:
                t = int(row["t"]) if "t" in row and row["t"] not in (None, "") else None
                vals = [float(row[c]) for c in feats] + [float(row["y"])]
            except (TypeError, ValueError) as exc:
                raise SeriesError(f"{path}:{lineno}: {exc}") from None
            rows.setdefault(sid, []).append((t, vals))
    if not rows:
        raise SeriesError(f"{path}: no data rows")
    out = []
    for sid, items in rows.items():
        ts = [t for t, _ in items]
        if all(t is not None for t in ts):
            order = np.argsort(ts, kind="stable")
            items = [items[i] for i in order]
            timestamps = np.asarray([items[i][0] for i in range(len(items))])
        else:
            timestamps = None
        out.append(TimeSeries(sid, np.asarray([v for _, v in items]), timestamps))
    return out


def _feature_key(name: str):
    tail = name[2:]
    return (0, int(tail), "") if tail.isdigit() else (1, 0, tail)
