"""Dense tensor containers and the filter flatten/unflatten plumbing.

Weights are stored as float32 throughout; reductions elsewhere in the
package accumulate in float64 before rounding back, which keeps
comparisons reproducible across platforms. Layout is fixed row-major
(out_ch, in_ch, kh, kw) so checkpoints stay portable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError

DTYPE = np.float32


@dataclass(frozen=True, eq=False)
class Tensor4:
    """One conv layer's weight bank: (out_channels, in_channels, kh, kw), float32.

    All four dims must be >= 1. The wrapped array is C-contiguous, so the
    flat view is row-major in exactly that dim order.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"Tensor4 expects 4 dims, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"Tensor4 dims must all be >= 1, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def out_ch(self) -> int:
        return self.data.shape[0]

    @property
    def in_ch(self) -> int:
        return self.data.shape[1]

    @property
    def kh(self) -> int:
        return self.data.shape[2]

    @property
    def kw(self) -> int:
        return self.data.shape[3]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class Matrix:
    """Dense 2-D float32 array, row-major. Zero rows are allowed."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=DTYPE)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix expects 2 dims, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class FilterSet:
    """A layer's filters flattened to vectors: row i is filter i.

    Each row preserves the (in_ch, kh, kw) order of the source tensor.
    """

    vectors: Matrix

    def __post_init__(self):
        if self.vectors.rows < 1 or self.vectors.cols < 1:
            raise ShapeError(
                f"FilterSet needs >= 1 filter of >= 1 weight, got "
                f"{self.vectors.rows}x{self.vectors.cols}"
            )

    @property
    def n(self) -> int:
        return self.vectors.rows

    @property
    def dim(self) -> int:
        return self.vectors.cols


def flatten_filters(w: Tensor4) -> FilterSet:
    """Flatten each output-channel slice of ``w`` into one row vector."""
    flat = w.data.reshape(w.out_ch, -1).copy()
    return FilterSet(Matrix(flat))


def unflatten_filters(fs: FilterSet, dims: tuple[int, int, int, int]) -> Tensor4:
    """Inverse of :func:`flatten_filters` for the given target dims."""
    out_ch, in_ch, kh, kw = dims
    if fs.n != out_ch or fs.dim != in_ch * kh * kw:
        raise ShapeError(
            f"cannot unflatten {fs.n}x{fs.dim} filters into dims {dims} "
            f"(need {out_ch} rows of {in_ch * kh * kw})"
        )
    return Tensor4(fs.vectors.data.reshape(out_ch, in_ch, kh, kw).copy())


def remove_rows(m: Matrix, idx: Sequence[int]) -> Matrix:
    """Delete the given strictly-increasing row indices, keeping row order."""
    idx = [int(i) for i in idx]
    for a, b in zip(idx, idx[1:]):
        if b <= a:
            raise ShapeError(f"row indices must be strictly increasing, got {idx}")
    for i in idx:
        if i < 0 or i >= m.rows:
            raise ShapeError(f"row index {i} out of range for {m.rows} rows")
    if not idx:
        return Matrix(m.data.copy())
    return Matrix(np.delete(m.data, idx, axis=0))
