"""Windowed-attention encoder/decoder for temporal action segmentation."""
from .model import ASFormer, ModelConfig, StagePredictions, alpha_schedule, window_schedule
from .tensor import Tensor, backward, no_grad

__all__ = [
    "ASFormer",
    "ModelConfig",
    "StagePredictions",
    "Tensor",
    "alpha_schedule",
    "backward",
    "no_grad",
    "window_schedule",
]
__version__ = "0.1.0"
