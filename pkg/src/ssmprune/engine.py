"""Structural pruning of linear-chain CNN models.

Pruning here is physical: the selected output channels are removed from
the conv layer's weights and bias, the matching input-channel slices are
removed from the next conv layer, and if the chain reaches a dense layer
through a flatten, the dense columns covering those channels' spatial
positions are removed. Parameter reductions reported downstream are
therefore real counts, not mask statistics.

Only linear chains are supported; residual shortcuts need channel
bookkeeping this package deliberately does not guess at.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConfigError, NotConvLayerError, ShapeError, StructureError
from .ranking import (
    PruneSelection,
    RankMethod,
    Ranking,
    area_rank,
    greedy_rank,
    select_prune_set,
)
from .similarity import Metric, build_ssm
from .tensor_core import DTYPE, Matrix, Tensor4, flatten_filters


# ---------------------------------------------------------------------------
# Layer specs and the model graph


@dataclass(eq=False)
class ConvLayer:
    name: str
    weights: Tensor4
    bias: np.ndarray  # (out_ch,) float32
    stride: int = 1
    padding: int = 0
    original_filters: int = 0  # filter count at build time, kept through pruning

    def __post_init__(self):
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE).ravel()
        if len(self.bias) != self.weights.out_ch:
            raise StructureError(
                f"{self.name}: bias length {len(self.bias)} != "
                f"out_ch {self.weights.out_ch}"
            )
        if self.stride < 1 or self.padding < 0:
            raise StructureError(f"{self.name}: bad stride/padding")
        if self.original_filters <= 0:
            self.original_filters = self.weights.out_ch


@dataclass(eq=False)
class ReluLayer:
    name: str


@dataclass(eq=False)
class MaxPoolLayer:
    name: str
    window: int = 2
    stride: int = 2

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise StructureError(f"{self.name}: pool window/stride must be >= 1")


@dataclass(eq=False)
class FlattenLayer:
    name: str


@dataclass(eq=False)
class DenseLayer:
    name: str
    weights: Matrix  # (out_features, in_features)
    bias: np.ndarray  # (out_features,)

    def __post_init__(self):
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE).ravel()
        if len(self.bias) != self.weights.rows:
            raise StructureError(
                f"{self.name}: bias length {len(self.bias)} != "
                f"out_features {self.weights.rows}"
            )


@dataclass(eq=False)
class SoftmaxXentLayer:
    name: str


Layer = Union[
    ConvLayer, ReluLayer, MaxPoolLayer, FlattenLayer, DenseLayer, SoftmaxXentLayer
]


@dataclass(eq=False)
class ModelGraph:
    """Ordered linear chain of layers plus the input image shape (C, H, W)."""

    input_shape: tuple[int, int, int]
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise StructureError(f"duplicate layer names: {names}")

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise StructureError(f"no layer named {name!r}")

    def conv_layers(self) -> list[ConvLayer]:
        return [l for l in self.layers if isinstance(l, ConvLayer)]

    def validate(self) -> tuple[int, ...]:
        """Re-check chain shape consistency; returns the output shape."""
        shapes = activation_shapes(self)
        return shapes[-1]


def _conv_out_hw(h: int, w: int, layer: ConvLayer) -> tuple[int, int]:
    kh, kw = layer.weights.kh, layer.weights.kw
    oh = (h + 2 * layer.padding - kh) // layer.stride + 1
    ow = (w + 2 * layer.padding - kw) // layer.stride + 1
    return oh, ow


def activation_shapes(g: ModelGraph) -> list[tuple[int, ...]]:
    """Shape entering each layer, plus the final output shape, in order.

    Raises StructureError on any chain inconsistency (channel counts,
    dense input widths, vanishing spatial dims, layers after flatten
    that need 2-D input).
    """
    cur: tuple[int, ...] = g.input_shape
    shapes = [cur]
    for layer in g.layers:
        if isinstance(layer, ConvLayer):
            if len(cur) != 3:
                raise StructureError(f"{layer.name}: conv needs (C,H,W) input, got {cur}")
            c, h, w = cur
            if layer.weights.in_ch != c:
                raise StructureError(
                    f"{layer.name}: expects {layer.weights.in_ch} input channels, "
                    f"chain provides {c}"
                )
            oh, ow = _conv_out_hw(h, w, layer)
            if oh < 1 or ow < 1:
                raise StructureError(f"{layer.name}: output spatial dims vanish")
            cur = (layer.weights.out_ch, oh, ow)
        elif isinstance(layer, MaxPoolLayer):
            if len(cur) != 3:
                raise StructureError(f"{layer.name}: pool needs (C,H,W) input, got {cur}")
            c, h, w = cur
            oh = (h - layer.window) // layer.stride + 1
            ow = (w - layer.window) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise StructureError(f"{layer.name}: pool output vanishes")
            cur = (c, oh, ow)
        elif isinstance(layer, FlattenLayer):
            if len(cur) != 3:
                raise StructureError(f"{layer.name}: flatten needs (C,H,W) input")
            cur = (cur[0] * cur[1] * cur[2],)
        elif isinstance(layer, DenseLayer):
            if len(cur) != 1:
                raise StructureError(f"{layer.name}: dense needs flat input, got {cur}")
            if layer.weights.cols != cur[0]:
                raise StructureError(
                    f"{layer.name}: expects {layer.weights.cols} inputs, "
                    f"chain provides {cur[0]}"
                )
            cur = (layer.weights.rows,)
        elif isinstance(layer, (ReluLayer, SoftmaxXentLayer)):
            pass
        else:  # pragma: no cover
            raise StructureError(f"unknown layer kind {type(layer).__name__}")
        shapes.append(cur)
    return shapes


# ---------------------------------------------------------------------------
# Prune configuration and reporting


class RatioBase(enum.Enum):
    CURRENT = "current"
    ORIGINAL = "original"

    @classmethod
    def parse(cls, name: str) -> "RatioBase":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ConfigError(
                f"unknown ratio base {name!r}; expected current or original"
            ) from None


@dataclass(frozen=True)
class PruneConfig:
    ratio: float = 0.10
    method: RankMethod = RankMethod.AREA
    metric: Metric = Metric.L2
    min_filters: int = 4
    pair_dedup: bool = True
    ratio_base: RatioBase = RatioBase.CURRENT
    prune_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"pruning ratio must lie in (0, 1), got {self.ratio}")
        if self.min_filters < 1:
            raise ConfigError(f"min_filters must be >= 1, got {self.min_filters}")
        if self.prune_epochs < 0:
            raise ConfigError(f"prune_epochs must be >= 0, got {self.prune_epochs}")


@dataclass(frozen=True)
class Deletion:
    """One slice removal applied to a named layer's parameters."""

    layer: str
    axis: str  # "conv_out" | "conv_in" | "dense_in"
    indices: tuple[int, ...]


@dataclass(frozen=True)
class LayerPruneRecord:
    layer_id: str
    pruned_indices: tuple[int, ...]
    filters_before: int
    filters_after: int
    params_before: int
    params_after: int


@dataclass(frozen=True)
class PruneReport:
    """What one prune step did, with exact parameter bookkeeping.

    ``directives`` lists every slice deletion the step applied, in order,
    so optimizer state held outside the graph can be cut to match.
    """

    epoch: int
    layers: tuple[LayerPruneRecord, ...]
    conv_params_before: int
    conv_params_after: int
    reduction_percent: float
    directives: tuple[Deletion, ...] = ()


# ---------------------------------------------------------------------------
# Parameter accounting


def layer_param_count(layer: ConvLayer, include_bias: bool = True) -> int:
    o, i, kh, kw = layer.weights.dims
    return o * i * kh * kw + (o if include_bias else 0)


def conv_param_count(g: ModelGraph, include_bias: bool = True) -> int:
    """Total parameters across all conv layers."""
    return sum(layer_param_count(l, include_bias) for l in g.conv_layers())


# ---------------------------------------------------------------------------
# Structural pruning


def _plan_conv_prune(
    g: ModelGraph, layer_id: str, indices: tuple[int, ...]
) -> list[Deletion]:
    """Deletions needed to remove the given filters and stay consistent."""
    layer = g.layer(layer_id)
    if not isinstance(layer, ConvLayer):
        raise NotConvLayerError(f"{layer_id} is not a conv layer")
    idx = tuple(int(i) for i in indices)
    for a, b in zip(idx, idx[1:]):
        if b <= a:
            raise ShapeError(f"prune indices must be strictly increasing, got {idx}")
    for i in idx:
        if i < 0 or i >= layer.weights.out_ch:
            raise ShapeError(
                f"{layer_id}: filter index {i} out of range "
                f"(layer has {layer.weights.out_ch})"
            )
    if layer.weights.out_ch - len(idx) < 1:
        raise StructureError(f"{layer_id}: cannot prune every filter")

    plan = [Deletion(layer_id, "conv_out", idx)]
    shapes = activation_shapes(g)
    pos = g.layers.index(layer)
    for j in range(pos + 1, len(g.layers)):
        nxt = g.layers[j]
        if isinstance(nxt, (ReluLayer, MaxPoolLayer)):
            continue
        if isinstance(nxt, ConvLayer):
            plan.append(Deletion(nxt.name, "conv_in", idx))
            break
        if isinstance(nxt, FlattenLayer):
            c, h, w = shapes[j]  # shape entering the flatten
            dense = None
            for k in range(j + 1, len(g.layers)):
                if isinstance(g.layers[k], DenseLayer):
                    dense = g.layers[k]
                    break
                if not isinstance(g.layers[k], (ReluLayer, SoftmaxXentLayer)):
                    break
            if dense is not None:
                cols = tuple(
                    ch * h * w + p for ch in idx for p in range(h * w)
                )
                plan.append(Deletion(dense.name, "dense_in", cols))
            break
        if isinstance(nxt, (DenseLayer, SoftmaxXentLayer)):
            break
    return plan


def _apply_deletions(g: ModelGraph, plan: list[Deletion]) -> ModelGraph:
    layers = list(g.layers)
    by_name = {l.name: i for i, l in enumerate(layers)}
    for d in plan:
        i = by_name[d.layer]
        layer = layers[i]
        idx = list(d.indices)
        if d.axis == "conv_out":
            assert isinstance(layer, ConvLayer)
            layers[i] = dataclasses.replace(
                layer,
                weights=Tensor4(np.delete(layer.weights.data, idx, axis=0)),
                bias=np.delete(layer.bias, idx),
            )
        elif d.axis == "conv_in":
            assert isinstance(layer, ConvLayer)
            layers[i] = dataclasses.replace(
                layer, weights=Tensor4(np.delete(layer.weights.data, idx, axis=1))
            )
        elif d.axis == "dense_in":
            assert isinstance(layer, DenseLayer)
            layers[i] = dataclasses.replace(
                layer, weights=Matrix(np.delete(layer.weights.data, idx, axis=1))
            )
        else:  # pragma: no cover
            raise StructureError(f"unknown deletion axis {d.axis}")
    return ModelGraph(g.input_shape, layers)


def prune_conv_layer(g: ModelGraph, layer_id: str, sel: PruneSelection) -> ModelGraph:
    """Remove the selected filters from one conv layer, propagating the
    matching input-slice removals downstream. Empty selections return the
    graph unchanged."""
    if not sel.indices:
        layer = g.layer(layer_id)
        if not isinstance(layer, ConvLayer):
            raise NotConvLayerError(f"{layer_id} is not a conv layer")
        return g
    plan = _plan_conv_prune(g, layer_id, sel.indices)
    pruned = _apply_deletions(g, plan)
    pruned.validate()
    return pruned


def _rank(ssm, method: RankMethod) -> Ranking:
    return greedy_rank(ssm) if method is RankMethod.GREEDY else area_rank(ssm)


def prune_step(
    g: ModelGraph, cfg: PruneConfig, epoch: int
) -> tuple[ModelGraph, PruneReport]:
    """Run one per-epoch prune pass over every conv layer in chain order.

    Each layer is flattened, scored against cfg.metric, ranked by
    cfg.method and cut by cfg.ratio (taken against its current or
    original filter count per cfg.ratio_base). Layers at or below
    min_filters are skipped. Past cfg.prune_epochs the step is a no-op
    that still reports zero pruning.
    """
    if epoch < 1:
        raise ConfigError(f"epoch must be >= 1, got {epoch}")
    before_total = conv_param_count(g)
    before_layers = {
        l.name: (l.weights.out_ch, layer_param_count(l)) for l in g.conv_layers()
    }
    conv_names = [l.name for l in g.conv_layers()]

    work = g
    pruned_idx: dict[str, tuple[int, ...]] = {name: () for name in conv_names}
    directives: list[Deletion] = []
    if epoch <= cfg.prune_epochs:
        for name in conv_names:
            layer = work.layer(name)
            assert isinstance(layer, ConvLayer)
            n_cur = layer.weights.out_ch
            if n_cur <= cfg.min_filters:
                continue
            ssm = build_ssm(flatten_filters(layer.weights), cfg.metric)
            ranking = _rank(ssm, cfg.method)
            base = (
                layer.original_filters
                if cfg.ratio_base is RatioBase.ORIGINAL
                else n_cur
            )
            sel = select_prune_set(
                ranking,
                n_cur,
                cfg.ratio,
                min_filters=cfg.min_filters,
                pair_dedup=cfg.pair_dedup,
                layer_id=name,
                base_count=base,
            )
            if sel.indices:
                plan = _plan_conv_prune(work, name, sel.indices)
                work = _apply_deletions(work, plan)
                directives.extend(plan)
                pruned_idx[name] = sel.indices
        work.validate()

    after_layers = {
        l.name: (l.weights.out_ch, layer_param_count(l)) for l in work.conv_layers()
    }
    records = tuple(
        LayerPruneRecord(
            layer_id=name,
            pruned_indices=pruned_idx[name],
            filters_before=before_layers[name][0],
            filters_after=after_layers[name][0],
            params_before=before_layers[name][1],
            params_after=after_layers[name][1],
        )
        for name in conv_names
    )
    after_total = conv_param_count(work)
    reduction = (
        100.0 * (1.0 - after_total / before_total) if before_total else 0.0
    )
    report = PruneReport(
        epoch=epoch,
        layers=records,
        conv_params_before=before_total,
        conv_params_after=after_total,
        reduction_percent=reduction,
        directives=tuple(directives),
    )
    return work, report
