"""Input validation helpers shared across the toolkit.

These mirror the scikit-learn ``check_array`` habit: normalize whatever the
caller hands us into a well-formed numpy array, or fail with a message that
names the offending argument.
"""

import numpy as np


def as_2d_array(data, name="array"):
    """Coerce to a 2D float64 array; reject anything of another rank."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    return arr


def as_binary_array(data, name="mask"):
    """Coerce to a 2D array whose values are exactly 0 or 1."""
    arr = as_2d_array(data, name)
    if not np.isin(arr, (0.0, 1.0)).all():
        bad = arr[~np.isin(arr, (0.0, 1.0))].flat[0]
        raise ValueError(f"{name} must contain only values 0 and 1, found {bad!r}")
    return arr


def as_unit_interval_array(data, name="prediction"):
    """Coerce to a 2D array with values in [0, 1] (soft masks allowed)."""
    arr = as_2d_array(data, name)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"{name} values must lie in [0, 1], got range "
            f"[{arr.min()}, {arr.max()}]"
        )
    return arr


def check_same_shape(a, b, a_name="gt", b_name="pr"):
    if a.shape != b.shape:
        raise ValueError(
            f"{a_name} and {b_name} must have identical dimensions, "
            f"got {a.shape} vs {b.shape}"
        )


def check_in_range(value, lo, hi, name):
    if not (lo <= value <= hi):
        raise ValueError(f"{name} must be in [{lo}, {hi}], got {value}")
