"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np


def check_video(x, name: str = "video", allow_single: bool = False) -> np.ndarray:
    """Return ``x`` as an F x H x W x 3 float array with values in [0, 1]."""
    arr = np.asarray(x)
    if allow_single and arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name}: expected shape (F, H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name}: needs at least one frame")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if arr.size and (np.nanmin(arr) < 0 or np.nanmax(arr) > 1 or not np.all(np.isfinite(arr))):
        raise ValueError(f"{name}: values must lie in [0, 1]")
    return arr


def check_sequence(x, name: str, frames: int | None = None, channels: int | None = None) -> np.ndarray:
    """Validate an F x H x W [x C] condition sequence."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3 and channels is not None:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ValueError(f"{name}: expected (F, H, W, C), got {arr.shape}")
    if frames is not None and arr.shape[0] != frames:
        raise ValueError(f"{name}: {arr.shape[0]} frames, expected {frames}")
    if channels is not None and arr.shape[-1] != channels:
        raise ValueError(f"{name}: {arr.shape[-1]} channels, expected {channels}")
    return arr


def check_probability(p: float, name: str) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {p}")
    return p


def check_divisible(size: int, factor: int, what: str) -> None:
    if factor < 1 or size % factor:
        raise ValueError(f"{what} {size} is not divisible by {factor}")
