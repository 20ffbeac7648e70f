"""Minimal reverse-mode autodiff with double-backward support."""

from . import ops
from .backward import grad, hvp
from .tensor import (
    GradError,
    ShapeError,
    Tape,
    TapeStats,
    Tensor,
    active_tape,
    collect_tape_stats,
    constant,
    leaf,
    no_tape,
)

__all__ = [
    "ops",
    "grad",
    "hvp",
    "GradError",
    "ShapeError",
    "Tape",
    "TapeStats",
    "Tensor",
    "active_tape",
    "collect_tape_stats",
    "constant",
    "leaf",
    "no_tape",
]
