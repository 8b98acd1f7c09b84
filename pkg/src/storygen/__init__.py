"""Desk-scale story continuation: given a source frame and captions, generate the rest."""

from .config import (ConfigError, DataSpec, GanConfig, ModelConfig, RunConfig,
                     TrainConfig, VaeTrainConfig)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataSpec",
    "GanConfig",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "VaeTrainConfig",
    "__version__",
]
