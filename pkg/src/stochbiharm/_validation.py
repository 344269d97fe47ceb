"""Small argument checks shared across modules."""
from __future__ import annotations

import numpy as np


def check_dimension(d: int) -> int:
    if d not in (1, 2, 3):
        raise ValueError(f"dimension must be 1, 2 or 3, got {d}")
    return d


def check_points(x, d: int) -> np.ndarray:
    """Return ``x`` as a float array with trailing axis ``d`` inside the closed unit cube."""
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0 or (d == 1 and pts.shape[-1] != 1):
        pts = pts[..., None]
    if pts.shape[-1] != d:
        raise ValueError(f"points must have trailing dimension {d}, got shape {pts.shape}")
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise ValueError("points must lie in the closed unit cube")
    return pts


def check_positive_int(value, name: str) -> int:
    if int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_time(t: float, T: float, name: str = "t") -> float:
    if not (0.0 <= t <= T):
        raise ValueError(f"{name}={t} outside [0, {T}]")
    return float(t)
