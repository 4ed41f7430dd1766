"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ShapeError, ValidationError


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValidationError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_unit_interval(value, name: str) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{name} must be a real number, got {value!r}") from None
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_non_negative(value, name: str) -> float:
    value = float(value)
    if not value >= 0.0:
        raise ValidationError(f"{name} must be >= 0, got {value}")
    return value


def check_same_shape(a, b, name_a: str, name_b: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(
            f"shape mismatch: {name_a} has shape {tuple(a.shape)}, "
            f"{name_b} has shape {tuple(b.shape)}"
        )


def check_last_dim(a, size: int, name_a: str, name_b: str) -> None:
    if a.shape[-1] != size:
        raise ShapeError(
            f"shape mismatch: {name_a} has trailing dimension {a.shape[-1]} "
            f"({tuple(a.shape)}) but {name_b} expects {size}"
        )


def check_finite_matrix(x, name: str, min_rows: int = 1) -> np.ndarray:
    """Return ``x`` as a finite float64 2-D array with at least ``min_rows`` rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D [n, f], got shape {x.shape}")
    if x.shape[0] < min_rows:
        raise ValidationError(f"{name} needs at least {min_rows} rows, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite entries")
    return x
