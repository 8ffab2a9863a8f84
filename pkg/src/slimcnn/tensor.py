"""Dense tensor helpers.

Tensors are plain numpy arrays. Storage defaults to float32 in row-major
(C) order; the helpers here validate shapes the way the rest of the package
expects (rank 1-4, every dim >= 1) and provide the few reductions the
layers and Grad-CAM need.
"""

from __future__ import annotations

import math
import sys
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float32
MAX_RANK = 4

_REDUCERS = {"sum": np.sum, "max": np.max, "mean": np.mean}


class ShapeError(ValueError):
    """Raised when a tensor shape or element count is inconsistent."""


def check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every dim must be >= 1, got {dims}")
    if math.prod(dims) > sys.maxsize:
        raise ShapeError(f"element count of {dims} overflows")
    return dims


def new_tensor(shape: Iterable[int], values: Sequence[float] | np.ndarray | None = None,
               fill: float | None = None) -> np.ndarray:
    """Build a float32 tensor from a flat row-major value list or a fill value."""
    dims = check_shape(shape)
    if values is not None and fill is not None:
        raise ValueError("pass either values or fill, not both")
    if values is None:
        return np.full(dims, 0.0 if fill is None else fill, dtype=DTYPE)
    flat = np.asarray(values, dtype=DTYPE).ravel()
    if flat.size != math.prod(dims):
        raise ShapeError(f"{flat.size} values do not fill shape {dims}")
    return flat.reshape(dims).copy()


def reshape(t: np.ndarray, shape: Iterable[int]) -> np.ndarray:
    dims = check_shape(shape)
    if math.prod(dims) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {dims}")
    return np.ascontiguousarray(t).reshape(dims)


def reduce(t: np.ndarray, axes: Iterable[int], mode: str = "sum") -> np.ndarray:
    """Reduce over ``axes`` with ``sum``, ``max`` or ``mean``; reduced dims are dropped."""
    if mode not in _REDUCERS:
        raise ValueError(f"unknown reduction {mode!r}")
    axes = tuple(sorted(set(int(a) for a in axes)))
    for a in axes:
        if not 0 <= a < t.ndim:
            raise ShapeError(f"axis {a} out of range for rank {t.ndim}")
    return np.asarray(_REDUCERS[mode](t, axis=axes), dtype=t.dtype)


def flat_index(index: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major flat offset of ``index`` within ``shape``."""
    if len(index) != len(shape):
        raise ShapeError("index rank does not match shape")
    offset = 0
    for i, d in zip(index, shape):
        if not 0 <= i < d:
            raise IndexError(f"index {tuple(index)} out of bounds for {tuple(shape)}")
        offset = offset * d + i
    return offset
