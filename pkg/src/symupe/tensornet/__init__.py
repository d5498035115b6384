"""Dense-array autodiff core and the vector-field transformer."""

from . import checkpoint, layers, optim, tensor
from .layers import rope_apply, sinusoidal_embed
from .model import ModelConfig, PianoFlow
from .optim import AdamW, LrSchedule, train_step
from .tensor import Tensor, grad_check

__all__ = [
    "AdamW",
    "LrSchedule",
    "ModelConfig",
    "PianoFlow",
    "Tensor",
    "checkpoint",
    "grad_check",
    "layers",
    "optim",
    "rope_apply",
    "sinusoidal_embed",
    "tensor",
    "train_step",
]
