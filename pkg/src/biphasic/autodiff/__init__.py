"""Minimal reverse-mode automatic differentiation over dense float64 arrays."""

from . import ops
from .gradcheck import GradCase, finite_difference_grad, register, run_gradcheck
from .optim import Adam, AdamState, adam_step
from .tensor import (
    AutodiffError,
    Graph,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    evaluate,
    name_scope,
    no_grad,
)

__all__ = [
    "Adam",
    "AdamState",
    "AutodiffError",
    "GradCase",
    "Graph",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "evaluate",
    "finite_difference_grad",
    "name_scope",
    "no_grad",
    "ops",
    "register",
    "run_gradcheck",
]
