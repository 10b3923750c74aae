"""Input validation helpers shared across the package.

All image arrays in this project are uint8 RGB with shape (H, W, 3),
H >= 32 and W >= 32. Helpers raise ValueError with a descriptive message
rather than letting malformed inputs propagate into numeric code.
"""

from __future__ import annotations

import numpy as np

MIN_IMAGE_SIDE = 32


def check_image(arr: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate an RGB uint8 image array and return it unchanged."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"{name} must be uint8, got {arr.dtype}")
    h, w = arr.shape[:2]
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise ValueError(
            f"{name} must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {h}x{w}"
        )
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} must have identical shapes: {a.shape} vs {b.shape}")


def check_finite_vector(x, name: str = "values", min_len: int = 1) -> np.ndarray:
    """Coerce to a finite 1-D float64 array of length >= min_len."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-dimensional, got ndim={arr.ndim}")
    if arr.size < min_len:
        raise ValueError(f"{name} needs at least {min_len} entries, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_unit_interval(y: float, name: str = "label") -> float:
    y = float(y)
    if not (0.0 <= y <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {y}")
    return y


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a finite positive number, got {value}")
    return value
