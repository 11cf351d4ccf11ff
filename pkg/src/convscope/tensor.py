"""Dense 4-D float64 tensors in (n, c, h, w) layout.

Tensors are plain ``numpy.ndarray`` objects; this module only adds the
construction and validation helpers the rest of the package relies on.
"""

from __future__ import annotations

import sys
from typing import Iterable, NamedTuple

import numpy as np

DTYPE = np.float64
AXES = "nchw"


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class Extent4(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w


def tensor_new(shape: Iterable[int], fill: float = 0.0) -> np.ndarray:
    ext = Extent4(*(int(s) for s in shape))
    if any(s < 0 for s in ext):
        raise ShapeError(f"negative extent in {tuple(ext)}")
    total = 1
    for s in ext:
        total *= s
    # python ints do not overflow, so compare against the addressable limit
    if total * np.dtype(DTYPE).itemsize > sys.maxsize:
        raise ShapeError(f"extent product {total} is not addressable")
    return np.full(tuple(ext), fill, dtype=DTYPE)


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a contiguous float64 4-D array, checking rank."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-D (n, c, h, w) tensor, got shape {arr.shape}")
    return arr


def flip_hw(t: np.ndarray) -> np.ndarray:
    """Reverse both spatial axes; applying it twice is the identity."""
    t = as_tensor(t)
    return np.ascontiguousarray(t[:, :, ::-1, ::-1])


def reduce_sum(t: np.ndarray, over: Iterable[str] = ()) -> np.ndarray:
    """Sum over the named axes (subset of ``"nchw"``), keeping them as extent 1."""
    t = as_tensor(t)
    axes = []
    for name in over:
        if name not in AXES:
            raise ShapeError(f"unknown axis {name!r}; expected one of {AXES}")
        axes.append(AXES.index(name))
    if not axes:
        return t.copy()
    return t.sum(axis=tuple(sorted(set(axes))), keepdims=True)


def assert_finite(t: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t)):
        raise FloatingPointError(f"non-finite values in {what}")
