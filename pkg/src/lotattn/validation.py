"""Input validation helpers shared across the package.

All public entry points normalize array inputs through these helpers so the
numerical code can assume float64 C-contiguous arrays with finite entries.
"""

from __future__ import annotations

import numpy as np

PROB_ATOL = 1e-12  # probability vectors must sum to 1 within this
MIN_MASS = 1e-15   # marginal entries below this are rejected, not clamped


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class ShapeMismatchError(InvalidInputError):
    """Array arguments have incompatible shapes."""


class UnsupportedSizeError(InvalidInputError):
    """Problem size exceeds a documented guard (e.g. brute-force oracles)."""


def as_matrix(x, name: str = "array") -> np.ndarray:
    """Coerce to a finite 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def as_vector(x, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def as_prob_vector(x, name: str = "marginal") -> np.ndarray:
    """Coerce to a strictly positive probability vector.

    Entries below MIN_MASS are rejected rather than clamped; positivity is
    the caller's responsibility (softmax parameterizations guarantee it).
    """
    arr = as_vector(x, name)
    if arr.size == 0:
        raise InvalidInputError(f"{name} must be non-empty")
    if np.any(arr < MIN_MASS):
        raise InvalidInputError(
            f"{name} has entries below {MIN_MASS:g}; masses must be strictly positive"
        )
    total = float(arr.sum())
    if abs(total - 1.0) > PROB_ATOL:
        raise InvalidInputError(f"{name} must sum to 1 within {PROB_ATOL:g}, got {total!r}")
    return arr


def require(condition: bool, message: str, exc: type = InvalidInputError) -> None:
    if not condition:
        raise exc(message)
