"""Minimal reverse-mode autodiff over float64 tensors."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn import BatchNorm2d, Conv2d, ConvBlock, Module, parameter
from .optim import Adam, AdamState, adam_step
from .tensor import DTYPE, Node, ShapeError, Tape, Tensor, no_grad

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "CheckpointError", "Conv2d", "ConvBlock", "DTYPE",
    "Module", "Node", "ShapeError", "Tape", "Tensor", "adam_step", "load_checkpoint",
    "no_grad", "ops", "parameter", "save_checkpoint",
]
