"""Input checks shared by the estimators and the control routines."""
from __future__ import annotations

import numpy as np


def check_fields(X, shape: tuple[int, ...], allow_single: bool = False,
                 extra_axes: int = 1, name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite float64 array of fields with grid ``shape``.

    Accepts ``extra_axes`` leading sample axes, or none when ``allow_single``.
    """
    X = np.asarray(X, dtype=np.float64)
    k = len(shape)
    ok = X.ndim == k + extra_axes or (allow_single and X.ndim == k)
    if not ok or tuple(X.shape[X.ndim - k:]) != tuple(shape):
        raise ValueError(f"{name} must have shape (..., {', '.join(map(str, shape))}) "
                         f"with {extra_axes} leading axes, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or Inf")
    return X


def check_pairs(X, y, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    X = check_fields(X, shape)
    y = check_fields(y, shape, name="y")
    if len(X) != len(y):
        raise ValueError(f"X and y hold different sample counts: {len(X)} vs {len(y)}")
    if len(X) == 0:
        raise ValueError("no samples")
    return X, y


def check_field(m, shape: tuple[int, ...], name: str = "m") -> np.ndarray:
    return check_fields(m, shape, allow_single=True, extra_axes=0, name=name)
