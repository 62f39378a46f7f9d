"""Input validation helpers used at every public boundary.

Raising early with a named argument beats letting NaNs propagate through a
training run, so the layer/pipeline code calls these liberally.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError


def as_f64(x, name: str = "array") -> np.ndarray:
    """Coerce to a float64 ndarray without copying when already one."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    return arr


def check_finite(x: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{name} contains {bad} non-finite value(s)")
    return x


def check_shape(x: np.ndarray, shape: tuple, name: str = "array") -> np.ndarray:
    if x.shape != tuple(shape):
        raise ValueError(f"{name} has shape {x.shape}, expected {tuple(shape)}")
    return x


def check_image(x, size: int | None = None, name: str = "image") -> np.ndarray:
    """Validate a (3,H,W) or (N,3,H,W) float image with pixels in [0,1]."""
    arr = as_f64(x, name)
    if arr.ndim not in (3, 4) or arr.shape[-3] != 3:
        raise ValueError(f"{name} must be (3,H,W) or (N,3,H,W), got {arr.shape}")
    if size is not None and arr.shape[-2:] != (size, size):
        raise ValueError(f"{name} must be {size}x{size}, got {arr.shape[-2]}x{arr.shape[-1]}")
    check_finite(arr, name)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} pixels must lie in [0,1], got range "
                         f"[{arr.min():.4g}, {arr.max():.4g}]")
    return arr


def check_gray(x, size: int | None = None, name: str = "sketch") -> np.ndarray:
    """Validate a (H,W) grayscale array in [0,1]."""
    arr = as_f64(x, name)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D (H,W), got shape {arr.shape}")
    if size is not None and arr.shape != (size, size):
        raise ValueError(f"{name} must be {size}x{size}, got {arr.shape[0]}x{arr.shape[1]}")
    check_finite(arr, name)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0,1]")
    return arr


def check_index(i: int, n: int, name: str) -> int:
    i = int(i)
    if not 0 <= i < n:
        raise ValueError(f"{name}={i} out of range [0, {n})")
    return i
