"""Stacked convolutional-recurrent network for continuous valence/arousal regression."""

from .model import CRNN, ModelSpec, build, count_params, load, save
from .numerics import Rng
from .training import TrainConfig, train

__all__ = ["CRNN", "ModelSpec", "Rng", "TrainConfig", "build", "count_params", "load", "save", "train"]
__version__ = "0.1.0"
