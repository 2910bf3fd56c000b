"""Distributional time-series forecasting with mixtures of LSTM experts.

Point labels are turned into per-step Gaussian (or binned) targets by
graph-smoothed variance estimation; a gated mixture of bidirectional LSTM
experts predicts per-step Gaussian mixtures and is trained with closed-form
MMD plus load-balance and diversity penalties.  A pattern-aware variant
splits the forecast additively into trend, seasonal, changepoint and
volatility parts.
"""
from .distributions import GaussianMixture1D, mmd2_closed, mmd2_rff, median_bandwidth
from .enhance import EnhanceConfig, detect_period, smooth_variance
from .experts import ExpertConfig, MultiExpertLDL, PointLSTM
from .pattern import PatternAwareLDL, PatternConfig, RegWeights
from .series import TimeSeries, WindowedDataset, make_windows, read_csv, time_split
from .synth import SynthSpec, synth
from .trainer import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "EnhanceConfig", "ExpertConfig", "GaussianMixture1D", "MultiExpertLDL", "PatternAwareLDL",
    "PatternConfig", "PointLSTM", "RegWeights", "SynthSpec", "TimeSeries", "TrainConfig",
    "WindowedDataset", "detect_period", "evaluate", "load_checkpoint", "make_windows",
    "median_bandwidth", "mmd2_closed", "mmd2_rff", "read_csv", "save_checkpoint",
    "smooth_variance", "synth", "time_split", "train",
]
