"""Flat parameter-vector algebra shared by optimizers and diagnostics.

Parameter vectors are plain 1-D float64 numpy arrays. The helpers here pin
down the conventions the rest of the package relies on: the zero-gradient
threshold used when normalizing perturbation directions, and the error types
raised on dimension mismatches and degenerate directions.
"""

from __future__ import annotations

import numpy as np

# Norms at or below this threshold are treated as zero when normalizing a
# direction; callers fall back to a zero perturbation.
DELTA_NORM = 1e-12


class DimensionError(ValueError):
    """Two parameter vectors of different lengths were combined."""


class DegenerateGradientError(ValueError):
    """A direction is numerically zero and cannot be scaled to a radius."""


def as_params(values) -> np.ndarray:
    """Coerce ``values`` to a 1-D float64 parameter vector."""
    w = np.asarray(values, dtype=np.float64)
    if w.ndim != 1:
        raise DimensionError(f"parameter vector must be 1-D, got shape {w.shape}")
    return w


def axpy(a: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Return ``a * x + y`` for equal-length vectors."""
    if x.shape != y.shape:
        raise DimensionError(f"length mismatch: {x.shape} vs {y.shape}")
    return a * x + y


def l2_norm(x: np.ndarray) -> float:
    """Euclidean norm of ``x``."""
    return float(np.sqrt(np.dot(x, x)))


def normalize_to_radius(x: np.ndarray, rho: float) -> np.ndarray:
    """Scale ``x`` to Euclidean length ``rho``.

    Raises DegenerateGradientError when the norm of ``x`` is at or below
    DELTA_NORM, i.e. the direction is numerically zero.
    """
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    n = l2_norm(x)
    if n <= DELTA_NORM:
        raise DegenerateGradientError(f"direction norm {n:g} is below {DELTA_NORM:g}")
    return (rho / n) * x
