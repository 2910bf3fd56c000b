"""Multi-expert label-distribution model.

N bidirectional-LSTM experts each map an input window to a per-step Gaussian
(mean, log-variance) or per-step categorical logits.  A temperature-scaled
softmax gate mixes them into a per-step Gaussian mixture (or categorical
mixture).  Training minimises a distribution distance plus load-balance and
diversity penalties on the experts.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import CategoricalDist, GaussianMixture1D
from .enhance import bin_centers, EnhanceConfig
from .layers import bilstm_forward, init_lstm_stack, init_mlp, mlp_forward

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


class ConfigError(ValueError):
    pass


@dataclass
class ExpertConfig:
    n_experts: int = 4
    hidden_dim: int = 128
    n_layers: int = 2
    window: int = 20
    horizon: int = 28
    n_features: int = 1
    temperature: float = 1.5
    noise_std: float = 0.1
    mode: str = "continuous"
    n_bins: int = 32
    bin_range: tuple = (-4.0, 4.0)
    head_dim: int = 64
    gate_hidden: int = 64

    def __post_init__(self):
        self.bin_range = tuple(float(v) for v in self.bin_range)
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be >= 1, got {self.n_experts}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.mode not in ("continuous", "discrete"):
            raise ConfigError(f"mode must be 'continuous' or 'discrete', got {self.mode!r}")

    def to_dict(self):
        d = asdict(self)
        d["bin_range"] = list(self.bin_range)
        return d

    @property
    def centers(self) -> np.ndarray:
        return bin_centers(EnhanceConfig(n_bins=self.n_bins, bin_range=self.bin_range))


@dataclass
class ExpertOutput:
    """One expert's output for one sample."""

    mu: np.ndarray  # (H,)
    logvar: np.ndarray  # (H,), already clamped
    repr: np.ndarray  # final bidirectional hidden state
    logits: np.ndarray | None = None  # (H, K) in discrete mode


@dataclass
class GateOutput:
    weights: np.ndarray  # (N,)
    logits: np.ndarray  # (N,) before noise


@dataclass
class BatchOutput:
    """Batched forward pass; tensors stay on the tape for training."""

    gate: Tensor  # (B, N)
    gate_logits: Tensor  # (B, N) pre-noise
    reprs: Tensor  # (N, B, 2h)
    mu: Tensor | None = None  # (B, H, N)
    logvar: Tensor | None = None  # (B, H, N)
    probs: Tensor | None = None  # (N, B, H, K) per-expert softmax
    mixture_probs: Tensor | None = None  # (B, H, K)
    extras: dict = field(default_factory=dict)

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar.data)

    def sample(self, b: int) -> tuple[list[ExpertOutput], GateOutput]:
        N = self.gate.shape[1]
        outs = []
        for i in range(N):
            if self.mu is not None:
                outs.append(ExpertOutput(self.mu.data[b, :, i], self.logvar.data[b, :, i],
                                         self.reprs.data[i, b]))
            else:
                outs.append(ExpertOutput(np.zeros(self.probs.shape[2]), np.zeros(self.probs.shape[2]),
                                         self.reprs.data[i, b], np.log(self.probs.data[i, b])))
        return outs, GateOutput(self.gate.data[b], self.gate_logits.data[b])


def gate_noise_rng(seed: int, *stream) -> np.random.Generator:
    return np.random.default_rng([int(seed), *(int(s) for s in stream)])


class MultiExpertLDL:
    kind = "multi_expert"

    def __init__(self, config: ExpertConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        N = c.n_experts
        init_lstm_stack(self.params, "experts.lstm", rng, N, c.n_features, c.hidden_dim, c.n_layers)
        rep = 2 * c.hidden_dim
        if c.mode == "continuous":
            init_mlp(self.params, "experts.mean", rng, N, [rep, c.head_dim, c.horizon])
            init_mlp(self.params, "experts.logvar", rng, N, [rep, c.head_dim, c.horizon])
        else:
            init_mlp(self.params, "experts.logits", rng, N, [rep, c.head_dim, c.horizon * c.n_bins])
        init_mlp(self.params, "gate", rng, 1, [c.window * c.n_features, c.gate_hidden, N])

    # -- forward ---------------------------------------------------------
    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        c = self.config
        if X.ndim != 3 or X.shape[1:] != (c.window, c.n_features):
            raise ad.ShapeError(f"expected input (B, {c.window}, {c.n_features}), got {X.shape}")
        return X

    def gate_forward(self, X, training: bool = False, rng: np.random.Generator | None = None):
        """Gate weights (B, N) and pre-noise logits (B, N)."""
        X = self._check_input(X)
        B = X.shape[0]
        flat = Tensor(X.reshape(1, B, -1))
        logits = mlp_forward(self.params, "gate", flat, 2).reshape(B, self.config.n_experts)
        noisy = logits
        if training and self.config.noise_std > 0:
            if rng is None:
                raise ValueError("training-mode gating needs an rng for the logit noise")
            noisy = logits + rng.normal(0.0, self.config.noise_std, size=logits.shape)
        return ad.softmax_with_temperature(noisy, self.config.temperature, axis=-1), logits

    def forward(self, X, training: bool = False, rng: np.random.Generator | None = None) -> BatchOutput:
        X = self._check_input(X)
        c = self.config
        B = X.shape[0]
        N = c.n_experts
        _, reprs = bilstm_forward(self.params, "experts.lstm", Tensor(X[None]), N, c.n_layers)
        gate, logits = self.gate_forward(X, training, rng)
        if c.mode == "continuous":
            mu = mlp_forward(self.params, "experts.mean", reprs, 2)  # (N, B, H)
            lv = ad.clip(mlp_forward(self.params, "experts.logvar", reprs, 2), LOGVAR_MIN, LOGVAR_MAX)
            return BatchOutput(gate, logits, reprs, mu=_expert_last(mu), logvar=_expert_last(lv))
        z = mlp_forward(self.params, "experts.logits", reprs, 2).reshape(N, B, c.horizon, c.n_bins)
        probs = ad.softmax_with_temperature(z, 1.0, axis=-1)
        g = ad.swapaxes(gate, 0, 1).reshape(N, B, 1, 1)
        return BatchOutput(gate, logits, reprs, probs=probs, mixture_probs=(g * probs).sum(axis=0))

    def predict_point(self, X) -> np.ndarray:
        return predict_point(self.forward(X), self.config)

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def _expert_last(t: Tensor) -> Tensor:
    """(N, B, H) -> (B, H, N)."""
    return ad.swapaxes(ad.swapaxes(t, 0, 1), 1, 2)


# -- mixture assembly -----------------------------------------------------

def mixture_assemble(outputs: Sequence[ExpertOutput], gate: GateOutput):
    """Per-step mixture for one sample: Gaussian mixtures, or categoricals if logits are set."""
    g = np.asarray(gate.weights, dtype=np.float64)
    if len(outputs) != g.size:
        raise ValueError(f"{len(outputs)} experts but {g.size} gate weights")
    if outputs[0].logits is not None:
        z = np.stack([o.logits for o in outputs])  # (N, H, K)
        p = np.exp(z - z.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        mix = np.tensordot(g, p, axes=1)
        return [CategoricalDist(row / row.sum()) for row in mix]
    mu = np.stack([o.mu for o in outputs])
    var = np.exp(np.clip(np.stack([o.logvar for o in outputs]), LOGVAR_MIN, LOGVAR_MAX))
    return [GaussianMixture1D(g, mu[:, h], var[:, h]) for h in range(mu.shape[1])]


def predict_point(out: BatchOutput, config: ExpertConfig | None = None) -> np.ndarray:
    """Mixture mean per step (B, H); expected bin centre in discrete mode."""
    if out.mu is not None:
        return np.einsum("bn,bhn->bh", out.gate.data, out.mu.data)
    return out.mixture_probs.data @ config.centers


# -- losses ---------------------------------------------------------------

def mmd2_mixture_gaussian(g: Tensor, mu: Tensor, var: Tensor, y, s2, kappa: float) -> Tensor:
    """Closed-form MMD^2 between per-step mixtures and Gaussian targets.

    g: (B, N); mu, var: (B, H, N); y, s2: (B, H) arrays.  Returns (B, H).
    """
    B, H, N = mu.shape
    k2 = kappa * kappa
    y = np.asarray(y, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    gi = g.reshape(B, 1, N, 1)
    gj = g.reshape(B, 1, 1, N)
    s_pp = var.reshape(B, H, N, 1) + var.reshape(B, H, 1, N) + k2
    d_pp = mu.reshape(B, H, N, 1) - mu.reshape(B, H, 1, N)
    k_pp = kappa / ad.sqrt(s_pp) * ad.exp(-ad.square(d_pp) / (2.0 * s_pp))
    e_pp = (gi * gj * k_pp).sum(axis=(2, 3))
    e_qq = kappa / np.sqrt(2.0 * s2 + k2)
    s_pq = var + (s2[..., None] + k2)
    d_pq = mu - y[..., None]
    k_pq = kappa / ad.sqrt(s_pq) * ad.exp(-ad.square(d_pq) / (2.0 * s_pq))
    e_pq = (g.reshape(B, 1, N) * k_pq).sum(axis=-1)
    return e_pp + e_qq - 2.0 * e_pq


def loss_distance(out: BatchOutput, target_mean, target_var=None, kappa: float = 1.0,
                  target_probs=None, eps: float = 1e-10) -> Tensor:
    """Mean MMD^2 (continuous) or mean KL(target || prediction) (discrete)."""
    if out.mu is not None:
        if target_var is None:
            raise ValueError("continuous predictions need Gaussian targets (mean and variance)")
        if np.shape(target_mean) != out.mu.shape[:2]:
            raise ad.ShapeError(f"targets {np.shape(target_mean)} vs predictions {out.mu.shape[:2]}")
        var = ad.exp(out.logvar)
        return mmd2_mixture_gaussian(out.gate, out.mu, var, target_mean, target_var, kappa).mean()
    if target_probs is None:
        raise ValueError("discrete predictions need categorical targets")
    t = np.asarray(target_probs, dtype=np.float64)
    if t.shape != out.mixture_probs.shape:
        raise ad.ShapeError(f"targets {t.shape} vs predictions {out.mixture_probs.shape}")
    ent = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
    cross = (ad.log(out.mixture_probs + eps) * t).sum(axis=-1)
    return (Tensor(ent.sum(axis=-1)) - cross).mean()


def loss_balance(gates: Tensor) -> Tensor:
    """Population variance of mean expert utilisation u = mean_b g[b]."""
    return ad.variance(gates.mean(axis=0))


def loss_diversity(reprs: Tensor, eps: float = 1e-12) -> Tensor:
    """Sum over ordered pairs i != j of cos(e_i, e_j), e_i = batch-mean representation."""
    N = reprs.shape[0]
    if N < 2:
        return Tensor(0.0)
    e = reprs.mean(axis=1)  # (N, D)
    D = e.shape[-1]
    cos = ad.cosine_similarity(e.reshape(N, 1, D), e.reshape(1, N, D), axis=-1, eps=eps)
    return (cos * (1.0 - np.eye(N))).sum()


def loss_total(distance, balance, diversity, lambda_bal: float = 0.01,
               lambda_div: float = 0.001) -> Tensor:
    if lambda_bal < 0 or lambda_div < 0:
        raise ValueError("loss weights must be nonnegative")
    return ad.as_tensor(distance) + lambda_bal * ad.as_tensor(balance) + lambda_div * ad.as_tensor(diversity)


def utilization(gates) -> np.ndarray:
    g = gates.data if isinstance(gates, Tensor) else np.asarray(gates)
    return g.reshape(-1, g.shape[-1]).mean(axis=0)


class PointLSTM:
    """Single bidirectional LSTM with a mean head, trained on squared error.

    Used as the point-forecast baseline.  ``forward`` returns a BatchOutput with
    one expert, unit gate and no variance head.
    """

    kind = "point_lstm"

    def __init__(self, config: ExpertConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        init_lstm_stack(self.params, "point.lstm", rng, 1, c.n_features, c.hidden_dim, c.n_layers)
        init_mlp(self.params, "point.mean", rng, 1, [2 * c.hidden_dim, c.head_dim, c.horizon])

    def forward(self, X, training: bool = False, rng=None) -> BatchOutput:
        X = np.asarray(X, dtype=np.float64)
        c = self.config
        if X.ndim != 3 or X.shape[1:] != (c.window, c.n_features):
            raise ad.ShapeError(f"expected input (B, {c.window}, {c.n_features}), got {X.shape}")
        B = X.shape[0]
        _, reprs = bilstm_forward(self.params, "point.lstm", Tensor(X[None]), 1, c.n_layers)
        mu = mlp_forward(self.params, "point.mean", reprs, 2)
        one = Tensor(np.ones((B, 1)))
        return BatchOutput(one, Tensor(np.zeros((B, 1))), reprs, mu=_expert_last(mu))

    def predict_point(self, X) -> np.ndarray:
        return self.forward(X).mu.data[..., 0]

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def loss_mse(out: BatchOutput, target_mean) -> Tensor:
    y = np.asarray(target_mean, dtype=np.float64)
    pred = (out.gate.reshape(out.gate.shape[0], 1, -1) * out.mu).sum(axis=-1)
    return ad.square(pred - y).mean()


def matched_point_config(config: ExpertConfig, budget: int) -> ExpertConfig:
    """Point-LSTM config whose parameter count is closest to ``budget``.

    Searches the hidden size (head width follows the reference config).
    """
    best = None
    for hdim in range(1, 513):
        c = ExpertConfig(**{**config.to_dict(), "n_experts": 1, "hidden_dim": hdim})
        n = _point_param_count(c)
        gap = abs(n - budget)
        if best is None or gap < best[0]:
            best = (gap, c)
        if n > budget:
            break
    return best[1]


def _point_param_count(c: ExpertConfig) -> int:
    h, n = c.hidden_dim, 0
    for layer in range(c.n_layers):
        i_dim = c.n_features if layer == 0 else 2 * h
        n += 2 * (i_dim * 4 * h + h * 4 * h + 4 * h)
    n += 2 * h * c.head_dim + c.head_dim + c.head_dim * c.horizon + c.horizon
    return n
