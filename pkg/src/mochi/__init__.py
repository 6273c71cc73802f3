"""Momentum contrast with feature-space hard negative mixing, at toy scale."""

from .config import DatasetConfig, TrainConfig, load_config, toy_config
from .synthesis import MochiConfig

__version__ = "0.1.0"

__all__ = ["DatasetConfig", "MochiConfig", "TrainConfig", "load_config", "toy_config", "__version__"]
