"""HTAN-SPD: sequential multi-task learning with time-variant piecewise-linear
activations, regularized through an adversarially trained SPD functional metric."""

from .autodiff import (
    DomainError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    constant,
)

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "constant",
    "ShapeError",
    "DomainError",
    "TapeError",
]
