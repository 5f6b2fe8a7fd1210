"""Small input-validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from .errors import ConfigError

COUNTER_COLUMNS = ("cache_references", "cache_misses", "itlb_ra", "itlb_wa")


def is_power_of_two(value: int) -> bool:
    return isinstance(value, (int, np.integer)) and value > 0 and (value & (value - 1)) == 0


def check_power_of_two(value, name):
    if not is_power_of_two(value):
        raise ConfigError(f"{name} must be a positive power of two, got {value!r}")
    return int(value)


def check_positive(value, name, strict=True):
    if value is None or (value <= 0 if strict else value < 0):
        bound = "> 0" if strict else ">= 0"
        raise ConfigError(f"{name} must be {bound}, got {value!r}")
    return value


def check_bytes(data, name="data") -> bytes:
    if isinstance(data, str):
        raise TypeError(f"{name} must be bytes-like, not str")
    return bytes(data)


def check_counter_matrix(X) -> np.ndarray:
    """Coerce counter samples to a float array of shape (n, 4).

    Accepts an array-like with columns ``refs, misses, itlb_ra, itlb_wa`` or an
    iterable of objects exposing those attributes (``CounterSample``).
    """
    if isinstance(X, Iterable) and not isinstance(X, np.ndarray):
        X = list(X)
        if X and hasattr(X[0], "cache_references"):
            X = [[getattr(s, c) for c in COUNTER_COLUMNS] for s in X]
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != len(COUNTER_COLUMNS):
        raise ValueError(f"expected counter matrix of shape (n, 4), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError("counter values must be finite and non-negative")
    return arr


def check_latencies(X) -> np.ndarray:
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-d array of latencies, got shape {arr.shape}")
    return arr
