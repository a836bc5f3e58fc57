"""Dense float64 arrays in row-major NCHW layout.

Tensors are plain :class:`numpy.ndarray` objects with ``dtype=float64``.
The helpers here add the shape checks and error types the rest of the
package relies on; they never return views into their inputs.
"""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import AxisOutOfRange, ShapeMismatch

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    """Copy ``x`` into a fresh C-contiguous float64 array."""
    return np.array(x, dtype=DTYPE, order="C", copy=True)


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(tuple(a), tuple(b)))
    except ValueError:
        raise ShapeMismatch(f"shapes {tuple(a)} and {tuple(b)} are not broadcast-compatible") from None


def broadcast_mul(a, b) -> np.ndarray:
    """Elementwise product with singleton dims expanded (trailing alignment)."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    broadcast_shape(a.shape, b.shape)
    return np.ascontiguousarray(a * b)


def normalize_axes(axes: Iterable[int] | int, ndim: int) -> tuple[int, ...]:
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisOutOfRange(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise AxisOutOfRange(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce_mean(x, axes: Iterable[int] | int) -> np.ndarray:
    """Mean over ``axes``; reduced dims are dropped from the result shape."""
    x = np.asarray(x, dtype=DTYPE)
    ax = normalize_axes(axes, x.ndim)
    return np.ascontiguousarray(np.mean(x, axis=ax))


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing a broadcast."""
    shape = tuple(shape)
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def element_count(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape, dtype=np.int64))
