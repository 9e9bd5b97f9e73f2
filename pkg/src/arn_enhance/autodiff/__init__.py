"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from . import ops
from .optim import AdamState, NonFiniteGradientError, adam_step
from .tensor import Tape, Tensor, backward

__all__ = ["AdamState", "NonFiniteGradientError", "Tape", "Tensor", "adam_step", "backward", "ops"]
