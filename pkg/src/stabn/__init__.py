"""ST-ABN: a spatio-temporal attention branch network on a numpy autograd core."""

from .errors import (
    ConfigurationError,
    FormatError,
    InputError,
    NumericalError,
    StabnError,
    UsageError,
)
from .model import AttentionOverride, ModelConfig, StAbnModel, build_model
from .synth import SynthConfig, VideoDataset, generate, load_dataset, save_dataset
from .tensor import Tensor, no_grad
from .train import TrainConfig, load_checkpoint, restore, save_checkpoint, train

__all__ = [
    "AttentionOverride",
    "ConfigurationError",
    "FormatError",
    "InputError",
    "ModelConfig",
    "NumericalError",
    "StAbnModel",
    "StabnError",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "UsageError",
    "VideoDataset",
    "build_model",
    "generate",
    "load_checkpoint",
    "load_dataset",
    "no_grad",
    "restore",
    "save_checkpoint",
    "save_dataset",
    "train",
]
__version__ = "0.1.0"
