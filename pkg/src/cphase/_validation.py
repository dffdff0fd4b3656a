"""Small argument checks shared by the estimators and the pipeline functions."""
from __future__ import annotations

import numpy as np


def check_positive(name: str, value: float) -> float:
    value = float(value)
    if not value > 0 or not np.isfinite(value):
        raise ValueError(f"{name} must be positive and finite, got {value}")
    return value


def check_odd_window(window: int) -> int:
    if int(window) != window or window < 1 or window % 2 == 0:
        raise ValueError(f"smoothing window must be an odd integer >= 1, got {window}")
    return int(window)


def check_series(name: str, arr, n_cols: int | None = None, min_len: int = 1) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1 and n_cols is not None and n_cols > 1:
        raise ValueError(f"{name} must be 2-D with {n_cols} columns")
    if n_cols is not None and arr.ndim == 2 and arr.shape[1] != n_cols:
        raise ValueError(f"{name} must have {n_cols} columns, got {arr.shape[1]}")
    if arr.shape[0] < min_len:
        raise ValueError(f"{name} needs at least {min_len} samples, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr
