"""Reverse-mode autodiff substrate for the sequence model and graph encoder."""

from . import ops
from .gradcheck import grad_check
from .tensor import (
    EngineError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    set_finite_checks,
)

__all__ = [
    "ops",
    "grad_check",
    "Tensor",
    "Tape",
    "EngineError",
    "ShapeError",
    "NonFiniteError",
    "set_finite_checks",
]
