"""Trajectory prediction with graph-isomorphism aggregation and attentive convolution."""

from .data import DatasetSpec, FrameSample, TrackPoint, TrajectoryWindow
from .errors import ConfigError, ContractError, DimensionError, EmptyFrameError
from .model import ModelConfig, ModelParams, forward, parameter_count
from .numerics import Tape, Tensor
from .training import TrainConfig, evaluate, train

__all__ = [
    "ConfigError",
    "ContractError",
    "DatasetSpec",
    "DimensionError",
    "EmptyFrameError",
    "FrameSample",
    "ModelConfig",
    "ModelParams",
    "Tape",
    "Tensor",
    "TrackPoint",
    "TrajectoryWindow",
    "TrainConfig",
    "evaluate",
    "forward",
    "parameter_count",
    "train",
]

__version__ = "0.1.0"
