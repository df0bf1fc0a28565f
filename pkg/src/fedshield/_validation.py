"""Input validation helpers shared by the estimators and protocol code."""

from __future__ import annotations

import math
import numbers

import numpy as np


def check_int(value, name: str, *, min_value: int | None = None, max_value: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    value = int(value)
    if min_value is not None and value < min_value:
        raise ValueError(f"{name} must be >= {min_value}, got {value}")
    if max_value is not None and value > max_value:
        raise ValueError(f"{name} must be <= {max_value}, got {value}")
    return value


def check_real(value, name: str, *, positive: bool = False, nonnegative: bool = False,
               allow_inf: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    value = float(value)
    if math.isnan(value) or (math.isinf(value) and not allow_inf):
        raise ValueError(f"{name} must be finite, got {value}")
    if positive and value <= 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    if nonnegative and value < 0:
        raise ValueError(f"{name} must be >= 0, got {value}")
    return value


def check_probability(value, name: str, *, closed_right: bool = False) -> float:
    value = check_real(value, name)
    upper_ok = value <= 1 if closed_right else value < 1
    if value < 0 or not upper_ok:
        bracket = "]" if closed_right else ")"
        raise ValueError(f"{name} must lie in [0, 1{bracket}, got {value}")
    return value


def check_vector(x, name: str = "vector", *, dim: int | None = None) -> np.ndarray:
    """Return ``x`` as a finite 1-D float64 array (no copy when already one)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr
