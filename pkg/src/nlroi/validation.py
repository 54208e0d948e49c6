"""Input validation helpers shared by the numerical ops and the estimators.

All public entry points funnel array arguments through these checks so that
shape and dtype errors surface as ``ValueError`` with messages naming the
offending argument, instead of cryptic failures deep inside a kernel.
"""

from __future__ import annotations

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.float64)


def as_tensor(x, name: str = "x", dtype=None) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float32/float64 ndarray.

    Plain lists and scalars are converted to float64; ndarrays must already
    carry one of the two supported precisions (no silent casts between
    them unless ``dtype`` asks for one explicitly).
    """
    if isinstance(x, np.ndarray):
        arr = x
    else:
        arr = np.asarray(x, dtype=np.float64 if dtype is None else dtype)
    if dtype is not None:
        dt = np.dtype(dtype)
        if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"requested dtype {dtype} is not float32/float64")
        arr = arr.astype(dt, copy=False)
    elif arr.dtype not in SUPPORTED_DTYPES:
        raise ValueError(f"{name} must be float32 or float64, got dtype {arr.dtype}")
    return np.ascontiguousarray(arr)


def check_rank(x: np.ndarray, rank: int, name: str = "x") -> np.ndarray:
    if x.ndim != rank:
        raise ValueError(
            f"{name} must have rank {rank}, got rank {x.ndim} with shape {x.shape}"
        )
    return x


def check_same_dtype(*named: tuple[str, np.ndarray]) -> np.dtype:
    """All arrays in one computation must share a single precision."""
    (first_name, first), *rest = named
    for name, arr in rest:
        if arr.dtype != first.dtype:
            raise ValueError(
                f"dtype mismatch: {first_name} is {first.dtype} but {name} is {arr.dtype}"
            )
    return first.dtype


def check_finite(x: np.ndarray, name: str = "x") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_feature_blob(x, channels: int | None = None, name: str = "x") -> np.ndarray:
    """Validate a per-RoI feature blob of shape (n_rois, channels, height, width)."""
    arr = as_tensor(x, name=name)
    check_rank(arr, 4, name=name)
    n, c, h, w = arr.shape
    if n < 1 or c < 1 or h < 1 or w < 1:
        raise ValueError(f"{name} extents must all be >= 1, got shape {arr.shape}")
    if channels is not None and c != channels:
        raise ValueError(
            f"{name} has {c} channels but {channels} channels were expected"
        )
    return arr


def frozen(a: np.ndarray) -> np.ndarray:
    """Mark an array we own as read-only; values are immutable after construction."""
    a.setflags(write=False)
    return a


def owned_copy(x, name: str = "x", dtype=None) -> np.ndarray:
    """A private, read-only copy of ``x`` (used by parameter containers)."""
    arr = as_tensor(x, name=name, dtype=dtype)
    return frozen(arr.copy())
