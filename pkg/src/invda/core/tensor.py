"""Dense float64 tensor value type.

A Tensor is an immutable wrapper around a C-contiguous float64 ndarray.
All module interfaces speak Tensor; numerical internals work on the raw
ndarray (``.data``).
"""

from __future__ import annotations

import numpy as np


class TensorError(ValueError):
    """Invalid tensor construction or incompatible shapes."""


class Tensor:
    """Immutable dense array of 64-bit reals.

    Values coming from external input must be finite; NaN/Inf are rejected
    at construction.
    """

    __slots__ = ("_data",)

    def __init__(self, values, shape=None):
        arr = np.asarray(values, dtype=np.float64)
        if shape is not None:
            arr = arr.reshape(shape)
        arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise TensorError("tensor values must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "_data", arr)

    @property
    def data(self) -> np.ndarray:
        """Read-only ndarray view of the values."""
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor(self._data.reshape(shape))

    def __array__(self, dtype=None):
        return self._data if dtype is None else self._data.astype(dtype)

    def __eq__(self, other):
        if isinstance(other, Tensor):
            return self.shape == other.shape and np.array_equal(self._data, other._data)
        return NotImplemented

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def as_ndarray(x) -> np.ndarray:
    """Raw float64 ndarray from Tensor / array-like (no finiteness check)."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)
