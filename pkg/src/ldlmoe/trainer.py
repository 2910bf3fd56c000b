"""Training loop, evaluation and checkpoints for all model families."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._alloc import tune_allocator
from .distributions import bandwidth_or_default, mixture_quantiles
from .enhance import EnhanceConfig, EnhancementResult, discretize, enhance_variances
from .experts import (ConfigError, ExpertConfig, MultiExpertLDL, PointLSTM, gate_noise_rng,
                      loss_balance, loss_distance, loss_diversity, loss_mse, loss_total,
                      matched_point_config, utilization)
from .pattern import (KINDS, PatternAwareLDL, PatternConfig, RegWeights, component_regs,
                      pattern_balance, pattern_distance, pattern_diversity, pattern_loss_total)
from .series import (Scaler, SeriesError, SplitSpec, TimeSeries, WindowedDataset, mae, make_windows,
                     mape, rmse, time_split, zscore_fit_transform)

log = logging.getLogger(__name__)

MODELS = ("multi_expert", "pattern_aware", "point_lstm")
CHECKPOINT_FORMAT = "ldlmoe-checkpoint"
CHECKPOINT_VERSION = 1
Z90 = 1.6448536269514722  # standard normal 0.95 quantile


class TrainingError(RuntimeError):
    """Non-finite loss during training; the message carries the diagnostics."""


@dataclass
class TrainConfig:
    model: str = "multi_expert"
    lr: float = 1e-3
    max_epochs: int = 200
    patience: int = 20
    batch_size: int = 64
    seed: int = 0
    lambda_bal: float = 0.01
    lambda_div: float = 0.001
    component_weights: dict = field(default_factory=lambda: {k.value: 1.0 for k in KINDS})
    clip_norm: float = 5.0
    test_len: int = 100
    val_fraction: float = 0.1
    kappa: float | None = None  # None: median heuristic over each batch's target means
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    pattern: PatternConfig = field(default_factory=PatternConfig)
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    # None: the seasonal period comes from the training series
    period: int | None = None

    def __post_init__(self):
        if isinstance(self.expert, dict):
            self.expert = ExpertConfig(**self.expert)
        if isinstance(self.pattern, dict):
            self.pattern = PatternConfig(**self.pattern)
        if isinstance(self.enhance, dict):
            self.enhance = EnhanceConfig(**self.enhance)
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.lambda_bal < 0 or self.lambda_div < 0:
            raise ConfigError("loss weights must be nonnegative")
        if any(w < 0 for w in self.component_weights.values()):
            raise ConfigError("component weights must be nonnegative")
        if self.model == "pattern_aware" and self.expert.mode != "continuous":
            raise ConfigError("the pattern-aware model only supports continuous mode")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["expert"] = self.expert.to_dict()
        d["enhance"] = self.enhance.to_dict()
        d["pattern"] = self.pattern.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    utilization: list = field(default_factory=list)  # per epoch, from training-mode gates
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val: float | None = None
    best_params_sha256: str = ""
    final_utilization: list = field(default_factory=list)  # eval-mode gates on the train split
    n_params: int = 0
    test_metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ----------------------------------------------------------------- data prep

@dataclass
class Prepared:
    """Scaled splits plus precomputed distributional targets."""

    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset  # data units
    scaler: Scaler
    train_var: np.ndarray  # (n_train, H) target variances, scaled units
    val_var: np.ndarray
    enhancement: EnhancementResult
    kappa: float | None
    period: int
    train_probs: np.ndarray | None = None
    val_probs: np.ndarray | None = None


def build_windows(series: list[TimeSeries], w: int, H: int) -> WindowedDataset:
    if not series:
        raise SeriesError("no series given")
    return WindowedDataset.concat([make_windows(s, w, H) for s in series])


def _target_variances(ds: WindowedDataset, enh: EnhancementResult) -> np.ndarray:
    offs = np.array([enh.offsets[s] for s in ds.series_ids], dtype=np.int64)
    rows = offs[:, None] + ds.target_starts[:, None] + np.arange(ds.H)
    return enh.variance[rows]


def prepare(series: list[TimeSeries], cfg: TrainConfig) -> Prepared:
    """Window, split chronologically, scale, and enhance labels once."""
    ec = cfg.expert
    w, H = ec.window, ec.horizon
    for s in series:
        if s.dim != ec.n_features:
            raise SeriesError(f"series {s.id!r} has {s.dim} features, config expects {ec.n_features}")
    ds = build_windows(series, w, H)
    train, val, test = time_split(ds, SplitSpec(cfg.test_len, cfg.val_fraction))
    train, scaler = zscore_fit_transform(train)
    val = scaler.transform(val)

    # labelled region = everything before the test rows, in scaled units
    segments = {s.id: scaler.transform_target(s.y[:len(s) - cfg.test_len]) for s in series}
    fit = WindowedDataset.concat([train, val])
    offset, offsets = 0, {}
    for sid, y in segments.items():
        offsets[sid] = offset
        offset += len(y)
    nodes = np.array([offsets[s] for s in fit.series_ids]) + fit.target_starts
    enh = enhance_variances(segments, fit.inputs.reshape(len(fit), -1), nodes, cfg.enhance)

    kappa = cfg.kappa
    period = cfg.period
    if period is None:
        found = [p for p in enh.periods.values() if p is not None]
        period = found[0][0] if found else 7
    prep = Prepared(train, val, test, scaler, _target_variances(train, enh),
                    _target_variances(val, enh), enh, kappa, int(period))
    if ec.mode == "discrete":
        dcfg = EnhanceConfig(n_bins=ec.n_bins, bin_range=ec.bin_range)
        prep.train_probs, n1 = discretize(train.targets, prep.train_var, dcfg)
        prep.val_probs, n2 = discretize(val.targets, prep.val_var, dcfg)
        if n1 + n2:
            log.warning("%d labels outside the bin range were clamped", n1 + n2)
    return prep


# ----------------------------------------------------------------- models

def build_model(cfg: TrainConfig, period: int, budget_reference: int | None = None):
    if cfg.model == "multi_expert":
        return MultiExpertLDL(cfg.expert, seed=cfg.seed)
    if cfg.model == "point_lstm":
        ref = budget_reference or MultiExpertLDL(cfg.expert, seed=cfg.seed).n_params()
        return PointLSTM(matched_point_config(cfg.expert, ref), seed=cfg.seed)
    pc = PatternConfig(**{**cfg.pattern.to_dict(), "window": cfg.expert.window,
                          "horizon": cfg.expert.horizon, "n_features": cfg.expert.n_features})
    pc.regs = RegWeights(**{**asdict(pc.regs), "p": int(period)})
    return PatternAwareLDL(pc, seed=cfg.seed)


def composite_loss(model, cfg: TrainConfig, X, y, s2, kappa: float, probs=None, training=False,
                   rng=None) -> tuple[ad.Tensor, dict, np.ndarray]:
    """Full training objective for one batch; returns (loss, parts, gate weights).

    ``kappa=None`` applies the median heuristic to this batch's target means.
    """
    if kappa is None:
        kappa = bandwidth_or_default(y)
    if model.kind == "point_lstm":
        out = model.forward(X)
        loss = loss_mse(out, y)
        return loss, {"mse": loss.item()}, out.gate.data
    if model.kind == "pattern_aware":
        out = model.forward(X, training, rng)
        dist = pattern_distance(out, y, s2, kappa)
        bal, div = pattern_balance(out), pattern_diversity(out)
        regs = component_regs(out, y, model.config.regs)
        loss = pattern_loss_total(dist, bal, div, regs, cfg.lambda_bal, cfg.lambda_div,
                                  cfg.component_weights)
        parts = {"distance": dist.item(), "balance": bal.item(), "diversity": div.item(),
                 **{k.value: r.item() for k, r in regs.items()}}
        return loss, parts, np.swapaxes(out.gates.data, 0, 1).reshape(len(X), -1)
    out = model.forward(X, training, rng)
    if model.config.mode == "continuous":
        dist = loss_distance(out, y, s2, kappa)
    else:
        dist = loss_distance(out, y, target_probs=probs)
    bal, div = loss_balance(out.gate), loss_diversity(out.reprs)
    loss = loss_total(dist, bal, div, cfg.lambda_bal, cfg.lambda_div)
    return loss, {"distance": dist.item(), "balance": bal.item(), "diversity": div.item()}, out.gate.data


def _batches(n: int, size: int):
    for lo in range(0, n, size):
        yield slice(lo, min(lo + size, n))


def eval_loss(model, cfg: TrainConfig, X, y, s2, kappa, probs=None) -> float:
    """Size-weighted composite loss in inference mode (no gate noise)."""
    total = 0.0
    for sl in _batches(len(X), cfg.batch_size):
        loss, _, _ = composite_loss(model, cfg, X[sl], y[sl], s2[sl], kappa,
                                    None if probs is None else probs[sl])
        total += loss.item() * (sl.stop - sl.start)
    return total / len(X)


def params_sha256(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    model: object
    train_config: TrainConfig
    scaler: Scaler
    kappa: float | None
    period: int
    optimizer: ad.AdamState = field(default_factory=ad.AdamState)

    @property
    def horizon(self) -> int:
        return self.model.config.horizon


def train(series: list[TimeSeries], cfg: TrainConfig, prepared: Prepared | None = None
          ) -> tuple[Checkpoint, TrainReport]:
    """Fit a model with Adam and early stopping on the validation composite loss."""
    tune_allocator()
    prep = prepared or prepare(series, cfg)
    model = build_model(cfg, prep.period)
    state = ad.AdamState()
    report = TrainReport(n_params=model.n_params())
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    Xtr, ytr, vtr = prep.train.inputs, prep.train.targets, prep.train_var
    Xva, yva, vva = prep.val.inputs, prep.val.targets, prep.val_var
    best_params = {k: p.data.copy() for k, p in model.params.items()}
    best_val, bad = np.inf, 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(Xtr))
        noise_rng = gate_noise_rng(cfg.seed, 2, epoch)
        ep_loss, gate_sum = 0.0, None
        for b, sl in enumerate(_batches(len(order), cfg.batch_size)):
            idx = order[sl]
            probs = None if prep.train_probs is None else prep.train_probs[idx]
            with ad.Tape() as tape:
                loss, parts, gates = composite_loss(model, cfg, Xtr[idx], ytr[idx], vtr[idx],
                                                    prep.kappa, probs, training=True, rng=noise_rng)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}: "
                                    + ", ".join(f"{k}={v!r}" for k, v in parts.items()))
            leaf_grads = tape.backward(loss)
            by_id = {id(t): g for t, g in leaf_grads.items()}
            grads = {name: by_id[id(p)] for name, p in model.params.items() if id(p) in by_id}
            ad.clip_global_norm(grads, cfg.clip_norm)
            ad.adam_step(model.params, grads, state, lr=cfg.lr)
            ep_loss += loss.item() * len(idx)
            g = gates.sum(axis=0)
            gate_sum = g if gate_sum is None else gate_sum + g
        report.train_loss.append(ep_loss / len(Xtr))
        report.utilization.append((gate_sum / len(Xtr)).tolist())
        val = eval_loss(model, cfg, Xva, yva, vva, prep.kappa, prep.val_probs)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        report.val_loss.append(val)
        report.stopped_epoch = epoch
        if val < best_val:
            best_val, bad = val, 0
            report.best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in model.params.items()}
        else:
            bad += 1
            if bad >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, report.best_epoch)
                break

    for k, p in model.params.items():
        p.data = best_params[k]
    report.best_val = None if not np.isfinite(best_val) else float(best_val)
    report.best_params_sha256 = params_sha256(model.params)
    report.final_utilization = train_utilization(model, Xtr, cfg.batch_size).tolist()
    ckpt = Checkpoint(model, cfg, prep.scaler, prep.kappa, prep.period, state)
    report.test_metrics = evaluate(ckpt, prep.test)
    return ckpt, report


def train_utilization(model, X, batch_size: int = 256) -> np.ndarray:
    """Mean inference-mode gate weight per expert (flattened over component groups)."""
    acc = None
    for sl in _batches(len(X), batch_size):
        if model.kind == "pattern_aware":
            g = np.swapaxes(model.forward(X[sl]).gates.data, 0, 1).reshape(sl.stop - sl.start, -1)
        else:
            g = model.forward(X[sl]).gate.data
        acc = g.sum(axis=0) if acc is None else acc + g.sum(axis=0)
    return utilization(acc[None] / len(X))


# ----------------------------------------------------------------- evaluation

def predict_distribution(model, X, batch_size: int = 256):
    """Point forecast, 5% and 95% quantiles (all (n, H), model units).

    The point baseline has no predictive distribution; its quantiles are None.
    """
    pts, lo, hi = [], [], []
    for sl in _batches(len(X), batch_size):
        xb = X[sl]
        if model.kind == "point_lstm":
            pts.append(model.predict_point(xb))
            continue
        out = model.forward(xb)
        if model.kind == "pattern_aware":
            m, sd = out.point.data, np.sqrt(out.variance.data)
            pts.append(m)
            lo.append(m - Z90 * sd)
            hi.append(m + Z90 * sd)
        elif model.config.mode == "continuous":
            g = np.broadcast_to(out.gate.data[:, None, :], out.mu.shape)
            pts.append(np.einsum("bn,bhn->bh", out.gate.data, out.mu.data))
            lo.append(mixture_quantiles(g, out.mu.data, out.var, 0.05))
            hi.append(mixture_quantiles(g, out.mu.data, out.var, 0.95))
        else:
            p = out.mixture_probs.data
            centers = model.config.centers
            pts.append(p @ centers)
            cdf = np.cumsum(p, axis=-1)
            lo.append(centers[np.argmax(cdf >= 0.05, axis=-1)])
            hi.append(centers[np.argmax(cdf >= 0.95, axis=-1)])
    point = np.concatenate(pts)
    if not lo:
        return point, None, None
    return point, np.concatenate(lo), np.concatenate(hi)


def evaluate(ckpt: Checkpoint, test: WindowedDataset) -> dict:
    """RMSE / MAE / MAPE plus empirical 90% interval coverage, all in data units.

    ``test`` is unscaled; the checkpoint's scaler is applied to the inputs.
    """
    if len(test) == 0:
        raise SeriesError("empty test set")
    if test.H != ckpt.horizon:
        raise SeriesError(f"horizon mismatch: data has {test.H}, model predicts {ckpt.horizon}")
    sc = ckpt.scaler
    X = (test.inputs - sc.mean) / sc.std
    truth = np.asarray(test.targets, dtype=np.float64)
    point, lo, hi = predict_distribution(ckpt.model, X)
    point = sc.inverse_target(point)
    metrics = {"rmse": rmse(point, truth), "mae": mae(point, truth), "mape": mape(point, truth),
               "n": int(truth.size)}
    if lo is not None:
        lo, hi = sc.inverse_target(lo), sc.inverse_target(hi)
        metrics["coverage90"] = float(np.mean((truth >= lo) & (truth <= hi)))
    else:
        metrics["coverage90"] = None
    return metrics


def metrics_json(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=True)


def held_out(series: list[TimeSeries], cfg: TrainConfig) -> WindowedDataset:
    """The held-out pairs, in data units, exactly as :func:`prepare` defines them."""
    ds = build_windows(series, cfg.expert.window, cfg.expert.horizon)
    return time_split(ds, SplitSpec(cfg.test_len, cfg.val_fraction))[2]


# ----------------------------------------------------------------- checkpoints

def _enc(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").reshape(d["shape"]).astype(np.float64)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    m = ckpt.model
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": m.kind,
        "model_config": m.config.to_dict() if hasattr(m.config, "to_dict") else asdict(m.config),
        "train_config": ckpt.train_config.to_dict(),
        "scaler": ckpt.scaler.to_dict(),
        "kappa": ckpt.kappa,
        "period": ckpt.period,
        "params": {k: _enc(p.data) for k, p in sorted(m.params.items())},
        "optimizer": {"t": ckpt.optimizer.t,
                      "m": {k: _enc(v) for k, v in sorted(ckpt.optimizer.m.items())},
                      "v": {k: _enc(v) for k, v in sorted(ckpt.optimizer.v.items())}},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a checkpoint file ({exc})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    kind = doc["model"]
    if kind == "multi_expert":
        model = MultiExpertLDL(ExpertConfig(**doc["model_config"]))
    elif kind == "point_lstm":
        model = PointLSTM(ExpertConfig(**doc["model_config"]))
    elif kind == "pattern_aware":
        model = PatternAwareLDL(PatternConfig(**doc["model_config"]))
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    stored = doc["params"]
    if set(stored) != set(model.params):
        raise ValueError(f"{path}: parameter names do not match a {kind} model")
    for k, p in model.params.items():
        arr = _dec(stored[k])
        if arr.shape != p.shape:
            raise ValueError(f"{path}: parameter {k} has shape {arr.shape}, expected {p.shape}")
        p.data = arr
    opt = ad.AdamState()
    opt.t = int(doc["optimizer"]["t"])
    opt.m = {k: _dec(v) for k, v in doc["optimizer"]["m"].items()}
    opt.v = {k: _dec(v) for k, v in doc["optimizer"]["v"].items()}
    return Checkpoint(model, TrainConfig.from_dict(doc["train_config"]), Scaler.from_dict(doc["scaler"]),
                      doc["kappa"], int(doc["period"]), opt)
