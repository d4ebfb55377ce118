"""Continual domain adaptation for road-surface classifiers.

Three training protocols over a stream of datasets: naive finetuning,
less-forgetful learning (embedding-anchored finetuning with a frozen head) and
joint retraining, plus the metrics and harness used to compare them.
"""

from .model import CLASS_NAMES, ConfigError, build_model, default_cnn_arch, default_mlp_arch
from .strategies import STRATEGIES, Hyperparams, run_protocol

__version__ = "0.1.0"

__all__ = ["CLASS_NAMES", "ConfigError", "Hyperparams", "STRATEGIES", "build_model",
           "default_cnn_arch", "default_mlp_arch", "run_protocol"]
