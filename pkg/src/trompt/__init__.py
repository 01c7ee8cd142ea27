"""Prompt-based tabular network on a small numpy autodiff engine."""

from .model import FeatureColumn, ModelConfig, TromptModel
from .train import TrainConfig, evaluate, fit

__all__ = ["FeatureColumn", "ModelConfig", "TrainConfig", "TromptModel", "evaluate", "fit"]
__version__ = "0.1.0"
