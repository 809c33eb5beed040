"""Redundancy ranking of filters from a similarity matrix.

Two rankers are provided. The greedy ranker scores each filter by its
nearest-neighbor distance (smallest off-diagonal row entry); the area
ranker scores it by the trapezoidal area under its whole row, a global
similarity measure. Both sort ascending with a stable index tie-break,
so identical inputs rank identically on every platform.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .similarity import SimilarityMatrix


class RankMethod(enum.Enum):
    GREEDY = "greedy"
    AREA = "area"

    @classmethod
    def parse(cls, name: str) -> "RankMethod":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ConfigError(
                f"unknown ranking method {name!r}; expected greedy or area"
            ) from None


@dataclass(frozen=True, eq=False)
class Ranking:
    """Filters ordered most-redundant first.

    ``order`` is a permutation of 0..n-1; ``scores`` is indexed by the
    original filter index. ``nearest`` (greedy only) holds each filter's
    closest other filter, lowest index winning ties; the area ranker
    leaves it None.
    """

    method: RankMethod
    order: np.ndarray
    scores: np.ndarray
    nearest: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return len(self.order)


@dataclass(frozen=True)
class PruneSelection:
    """Indices chosen for removal from one layer.

    ``floor_applied`` is True when the min-filters floor cut the request
    short of floor(ratio * base).
    """

    layer_id: str
    indices: tuple[int, ...]
    ratio_used: float
    floor_applied: bool


def _check_size(ssm: SimilarityMatrix) -> np.ndarray:
    if ssm.n < 2:
        raise ShapeError(f"ranking needs >= 2 filters, got {ssm.n}")
    return ssm.values.data.astype(np.float64)


def greedy_rank(ssm: SimilarityMatrix) -> Ranking:
    """Rank filters by nearest-neighbor distance, closest pair first.

    The diagonal is excluded from each row's minimum: a filter's zero
    self-distance carries no pairing information.
    """
    v = _check_size(ssm)
    np.fill_diagonal(v, np.inf)
    scores = v.min(axis=1)
    nearest = v.argmin(axis=1).astype(np.int64)
    order = np.argsort(scores, kind="stable").astype(np.int64)
    return Ranking(RankMethod.GREEDY, order, scores, nearest)


def area_rank(ssm: SimilarityMatrix) -> Ranking:
    """Rank filters by trapezoidal area under their full similarity row.

    The zero diagonal entry stays in the row; it contributes the same to
    every filter and cannot reorder them for a symmetric metric.
    """
    v = _check_size(ssm)
    scores = np.trapezoid(v, axis=1)
    order = np.argsort(scores, kind="stable").astype(np.int64)
    return Ranking(RankMethod.AREA, order, scores, None)


def select_prune_set(
    r: Ranking,
    n_current: int,
    ratio: float,
    min_filters: int = 4,
    pair_dedup: bool = True,
    layer_id: str = "",
    base_count: Optional[int] = None,
) -> PruneSelection:
    """Pick the filters to remove this step from a ranking.

    Requests floor(ratio * base) filters (base defaults to the current
    count; pass ``base_count`` to prune against the original count), then
    clamps so at least ``min_filters`` survive. With ``pair_dedup`` on,
    the greedy walk keeps one member of each nearest-neighbor pair: when
    a filter is selected, its recorded partner is protected and skipped
    if it comes up later, the next ranked filter taking its place.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"pruning ratio must lie in (0, 1), got {ratio}")
    if min_filters < 1:
        raise ConfigError(f"min_filters must be >= 1, got {min_filters}")
    if n_current != r.n:
        raise ShapeError(
            f"ranking covers {r.n} filters but layer has {n_current}"
        )
    base = n_current if base_count is None else base_count
    # +1e-9 realizes the mathematical floor for decimal ratios stored in
    # binary floating point (e.g. 0.3 * 10 -> 2.999...96).
    intended = int(math.floor(ratio * base + 1e-9))
    allowed = max(0, n_current - min_filters)
    count = min(intended, allowed)
    floor_applied = count < intended

    dedup = (
        pair_dedup and r.method is RankMethod.GREEDY and r.nearest is not None
    )
    selected: list[int] = []
    protected: set[int] = set()
    for f in r.order:
        if len(selected) == count:
            break
        f = int(f)
        if dedup and f in protected:
            continue
        selected.append(f)
        if dedup:
            protected.add(int(r.nearest[f]))
    return PruneSelection(layer_id, tuple(sorted(selected)), ratio, floor_applied)
