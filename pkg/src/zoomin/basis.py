"""Linear-in-parameters segment families.

Only the two families needed for closed-form per-side least squares are
supported: ``"constant"`` (a single level) and ``"affine"`` (intercept and
slope in x).
"""
from __future__ import annotations

import numpy as np

from .errors import ValidationError

BASES = ("constant", "affine")


def check_basis(name: str) -> str:
    if name not in BASES:
        raise ValidationError(f"unknown basis {name!r}; expected one of {BASES}")
    return name


def dim(name: str) -> int:
    return {"constant": 1, "affine": 2}[check_basis(name)]


def design(name: str, x) -> np.ndarray:
    """Design matrix of shape (len(x), dim(name))."""
    x = np.asarray(x, dtype=float)
    if check_basis(name) == "constant":
        return np.ones((x.size, 1))
    return np.column_stack([np.ones(x.size), x])


def evaluate(name: str, beta, x) -> np.ndarray:
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.size != dim(name):
        raise ValidationError(f"basis {name!r} needs {dim(name)} coefficients, got {beta.size}")
    return design(name, x) @ beta
