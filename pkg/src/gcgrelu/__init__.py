"""Generalized multi-piecewise ReLU and globally connected CNNs in plain numpy."""
from .errors import GCGReluError
from .grelu import GReluParams, grelu_forward, make_degenerate
from .gcnet import GCNet, build_smallnet, build_toy, gcnet_backward, gcnet_forward, param_count
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "GCGReluError", "GReluParams", "grelu_forward", "make_degenerate", "GCNet",
    "build_smallnet", "build_toy", "gcnet_backward", "gcnet_forward", "param_count",
    "TrainConfig", "train",
]
