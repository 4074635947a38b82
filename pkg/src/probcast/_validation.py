"""Input validation helpers shared by the estimators."""

import numbers

import numpy as np

from .dataset import ForecastArchive


def check_archive(X, name="X") -> ForecastArchive:
    if not isinstance(X, ForecastArchive):
        raise TypeError(f"{name} must be a ForecastArchive, got {type(X).__name__}")
    return X


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_seed(seed):
    """Accept an int seed, a SeedSequence or a Generator; return a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ValueError("an explicit seed is required")
    return np.random.default_rng(seed)


def check_finite(arr, name):
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr
