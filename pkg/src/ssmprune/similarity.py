"""Pairwise filter distances and self-similarity matrix construction.

All four metrics use distance semantics: low value = similar filters.
Entries are accumulated in float64 and stored as float32. Pairs are
reduced row-against-row (never via a gram-matrix trick) so that
permuting the input rows permutes the matrix bit-exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_core import FilterSet, Matrix


class Metric(enum.Enum):
    """Supported filter-distance metrics."""

    L2 = "l2"
    COSINE = "cosine"
    CITYBLOCK = "cityblock"
    KL = "kl"

    @classmethod
    def parse(cls, name: str) -> "Metric":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ConfigError(
                f"unknown metric {name!r}; expected one of "
                + ", ".join(m.value for m in cls)
            ) from None

    @property
    def symmetric(self) -> bool:
        return self is not Metric.KL


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """n x n matrix of pairwise filter distances for one layer.

    For the symmetric metrics (l2, cosine, cityblock) the diagonal is
    exactly zero and the matrix is symmetric; KL is stored as computed,
    direction i -> j, without symmetrisation.
    """

    n: int
    metric: Metric
    values: Matrix

    def __post_init__(self):
        if self.values.rows != self.n or self.values.cols != self.n:
            raise ShapeError(
                f"similarity matrix must be {self.n}x{self.n}, got "
                f"{self.values.rows}x{self.values.cols}"
            )

    def as_array(self) -> np.ndarray:
        return self.values.data


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.size == 0 or y.size == 0:
        raise ShapeError("distance is undefined for empty vectors")
    if x.shape != y.shape:
        raise ShapeError(f"vector lengths differ: {x.size} vs {y.size}")


def normalize_for_kl(x) -> np.ndarray:
    """Map a raw weight vector to a strictly positive probability vector.

    Softmax with max-subtraction: never overflows and never produces a
    zero component, so downstream KL terms stay finite.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ShapeError("cannot normalize an empty vector")
    shifted = x - x.max()
    e = np.exp(shifted)
    # exp underflows to 0 for spreads beyond ~745; clamp at the smallest
    # normal so every component stays strictly positive
    e = np.maximum(e, np.finfo(np.float64).tiny)
    return e / e.sum()


def _cosine(x: np.ndarray, y: np.ndarray) -> float:
    nx = math.sqrt(float(np.sum(x * x)))
    ny = math.sqrt(float(np.sum(y * y)))
    if nx == 0.0 and ny == 0.0:
        return 0.0
    if nx == 0.0 or ny == 0.0:
        return 1.0
    return 1.0 - float(np.sum(x * y)) / (nx * ny)


def distance(metric: Metric, x, y) -> float:
    """Distance between two weight vectors under the given metric.

    l2 and cityblock are the usual Euclidean / L1 distances; cosine is
    1 - cosine similarity (zero vectors: 0 against another zero vector,
    1 against anything else); kl is KL(p || q) over softmax-normalized
    inputs and is therefore asymmetric.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    _check_pair(x, y)
    if metric is Metric.L2:
        d = x - y
        return float(np.sqrt(np.sum(d * d)))
    if metric is Metric.CITYBLOCK:
        return float(np.sum(np.abs(x - y)))
    if metric is Metric.COSINE:
        return _cosine(x, y)
    p = normalize_for_kl(x)
    q = normalize_for_kl(y)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def build_ssm(fs: FilterSet, metric: Metric) -> SimilarityMatrix:
    """Compute the full pairwise distance matrix over a layer's filters.

    For symmetric metrics only the upper triangle is evaluated and
    mirrored, with the diagonal pinned to exactly zero. Each entry is
    reduced from its two rows alone, so relabeling filters permutes the
    result without changing any floating-point value.
    """
    n = fs.n
    if n < 2:
        raise ShapeError(f"a similarity matrix needs >= 2 filters, got {n}")
    x = fs.vectors.data.astype(np.float64)
    vals = np.zeros((n, n), dtype=np.float64)

    if metric is Metric.KL:
        p = np.empty_like(x)
        for i in range(n):
            p[i] = normalize_for_kl(x[i])
        logp = np.log(p)
        for i in range(n):
            vals[i, :] = np.sum(p[i] * (logp[i] - logp), axis=1)
    elif metric is Metric.COSINE:
        norms = np.sqrt(np.sum(x * x, axis=1))
        for i in range(n - 1):
            rest = x[i + 1 :]
            dots = np.sum(x[i] * rest, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                d = 1.0 - dots / (norms[i] * norms[i + 1 :])
            zi = norms[i] == 0.0
            zj = norms[i + 1 :] == 0.0
            d = np.where(zi | zj, np.where(zi & zj, 0.0, 1.0), d)
            vals[i, i + 1 :] = d
            vals[i + 1 :, i] = d
    else:
        for i in range(n - 1):
            diff = x[i] - x[i + 1 :]
            if metric is Metric.L2:
                d = np.sqrt(np.sum(diff * diff, axis=1))
            else:
                d = np.sum(np.abs(diff), axis=1)
            vals[i, i + 1 :] = d
            vals[i + 1 :, i] = d

    return SimilarityMatrix(n=n, metric=metric, values=Matrix(vals.astype(np.float32)))
