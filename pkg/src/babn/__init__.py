"""Bayesian attention belief networks on a small numpy autodiff core."""

from .attention import AttentionConfig, AttentionModel
from .belief import BabnConstants, BabnModel, posterior_stats
from .checkpoint import Checkpoint, convert_checkpoint, model_from_checkpoint
from .randvar import GammaParams, RngStream, WeibullParams, kl_weibull_gamma, weibull_reparam
from .train import TrainConfig

__all__ = [
    "AttentionConfig", "AttentionModel", "BabnConstants", "BabnModel", "posterior_stats",
    "Checkpoint", "convert_checkpoint", "model_from_checkpoint", "GammaParams", "RngStream",
    "WeibullParams", "kl_weibull_gamma", "weibull_reparam", "TrainConfig",
]
