"""Anytime-valid sequential tests for sparse anomalies in many Gaussian streams."""

from avsparse.model import (
    ModelParams,
    PathBundle,
    StreamState,
    advance,
    detection_boundary,
    detection_moment,
    generate_path,
    max_power,
    path_seed,
    signal_from_timescale,
    sparsity_from_beta,
)
from avsparse.martingales import (
    EmConfig,
    GridPrior,
    MaxMartingale,
    MixtureMartingale,
    OracleMartingale,
    ParamPair,
    PluginMartingale,
    PluginState,
    build_grid,
    em_fit,
    log_lr,
    log_lr_stream,
    log_max_martingale,
    log_mixture,
    plugin_step,
)

__version__ = "0.1.0"

__all__ = [
    "EmConfig",
    "GridPrior",
    "MaxMartingale",
    "MixtureMartingale",
    "ModelParams",
    "OracleMartingale",
    "ParamPair",
    "PathBundle",
    "PluginMartingale",
    "PluginState",
    "StreamState",
    "advance",
    "build_grid",
    "detection_boundary",
    "detection_moment",
    "em_fit",
    "generate_path",
    "log_lr",
    "log_lr_stream",
    "log_max_martingale",
    "log_mixture",
    "max_power",
    "path_seed",
    "plugin_step",
    "signal_from_timescale",
    "sparsity_from_beta",
]
