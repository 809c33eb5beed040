import numpy as np
import pytest

from oracles import ref_chain_params, ref_schedule
from ssmprune.engine import (
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    MaxPoolLayer,
    ModelGraph,
    PruneConfig,
    RatioBase,
    ReluLayer,
    SoftmaxXentLayer,
    conv_param_count,
    prune_conv_layer,
    prune_step,
)
from ssmprune.errors import NotConvLayerError, ShapeError, StructureError
from ssmprune.ranking import PruneSelection, RankMethod
from ssmprune.similarity import Metric
from ssmprune.tensor_core import Matrix, Tensor4
from ssmprune.trainer import forward, he_conv, he_dense, vgg_mini


def sel(layer, indices):
    return PruneSelection(layer, tuple(indices), 0.1, False)


def two_conv_graph(rng, c1=4, c2=8):
    return ModelGraph(
        (3, 8, 8),
        [
            he_conv("conv1", c1, 3, 3, rng, padding=1),
            ReluLayer("relu1"),
            he_conv("conv2", c2, c1, 3, rng, padding=1),
            SoftmaxXentLayer("loss"),
        ],
    )


def conv_dense_graph(rng, c1=4):
    return ModelGraph(
        (3, 8, 8),
        [
            he_conv("conv1", c1, 3, 3, rng, padding=1),
            ReluLayer("relu1"),
            MaxPoolLayer("pool1", 2, 2),
            FlattenLayer("flatten"),
            he_dense("fc1", 10, c1 * 4 * 4, rng),
            SoftmaxXentLayer("loss"),
        ],
    )


# ---------------------------------------------------------------------------
# prune_conv_layer


def test_prune_propagates_to_next_conv():
    g = two_conv_graph(np.random.default_rng(0))
    g2 = prune_conv_layer(g, "conv1", sel("conv1", [1, 3]))
    assert g2.layer("conv1").weights.dims == (2, 3, 3, 3)
    assert g2.layer("conv2").weights.dims == (8, 2, 3, 3)
    assert len(g2.layer("conv1").bias) == 2
    # surviving slices keep their values
    assert np.array_equal(
        g2.layer("conv1").weights.data, g.layer("conv1").weights.data[[0, 2]]
    )
    assert np.array_equal(
        g2.layer("conv2").weights.data, g.layer("conv2").weights.data[:, [0, 2]]
    )


def test_prune_empty_selection_is_identity():
    g = two_conv_graph(np.random.default_rng(1))
    g2 = prune_conv_layer(g, "conv1", sel("conv1", []))
    assert g2 is g


def test_prune_not_a_conv_layer():
    g = two_conv_graph(np.random.default_rng(2))
    with pytest.raises(NotConvLayerError):
        prune_conv_layer(g, "relu1", sel("relu1", [0]))


def test_prune_rejects_bad_indices():
    g = two_conv_graph(np.random.default_rng(3))
    with pytest.raises(ShapeError):
        prune_conv_layer(g, "conv1", sel("conv1", [4]))
    with pytest.raises(ShapeError):
        prune_conv_layer(g, "conv1", sel("conv1", [2, 1]))
    with pytest.raises(StructureError):
        prune_conv_layer(g, "conv1", sel("conv1", [0, 1, 2, 3]))


def test_prune_into_dense_removes_channel_columns():
    rng = np.random.default_rng(4)
    g = conv_dense_graph(rng, c1=4)
    g2 = prune_conv_layer(g, "conv1", sel("conv1", [2]))
    fc_old = g.layer("fc1").weights.data
    fc_new = g2.layer("fc1").weights.data
    assert fc_new.shape == (10, 3 * 4 * 4)
    keep = [c * 16 + p for c in (0, 1, 3) for p in range(16)]
    assert np.array_equal(fc_new, fc_old[:, keep])
    g2.validate()


@pytest.mark.parametrize("graph_kind", ["conv", "dense"])
def test_zero_downstream_slice_preserves_function(graph_kind):
    rng = np.random.default_rng(5)
    if graph_kind == "conv":
        g = two_conv_graph(rng)
        nxt = g.layer("conv2")
        nxt.weights.data[:, 1] = 0.0  # silence channel 1's contribution
    else:
        g = conv_dense_graph(rng)
        fc = g.layer("fc1")
        fc.weights.data[:, 16:32] = 0.0  # columns of channel 1
    x = rng.normal(size=(20, 3, 8, 8)).astype(np.float32)
    before, _ = forward(g, x)
    g2 = prune_conv_layer(g, "conv1", sel("conv1", [1]))
    after, _ = forward(g2, x)
    assert np.max(np.abs(after - before)) < 1e-5


# ---------------------------------------------------------------------------
# conv_param_count


def test_param_count_single_layer():
    rng = np.random.default_rng(6)
    g = ModelGraph(
        (3, 8, 8),
        [he_conv("conv1", 2, 3, 3, rng, padding=1), SoftmaxXentLayer("loss")],
    )
    assert conv_param_count(g) == 56  # 54 weights + 2 bias
    assert conv_param_count(g, include_bias=False) == 54


def test_param_count_empty_graph():
    g = ModelGraph((3, 8, 8), [SoftmaxXentLayer("loss")])
    assert conv_param_count(g) == 0


def test_param_count_vgg_mini_manual_tally():
    g = vgg_mini(seed=0)
    # per-layer: out*in*3*3 + out
    want = (
        (32 * 3 * 9 + 32)
        + (32 * 32 * 9 + 32)
        + (64 * 32 * 9 + 64)
        + (64 * 64 * 9 + 64)
    )
    assert conv_param_count(g) == want == 65568


# ---------------------------------------------------------------------------
# prune_step


def three_conv_graph(rng, filters=(16, 24, 32)):
    layers = []
    c = 3
    for i, f in enumerate(filters, start=1):
        layers.append(he_conv(f"conv{i}", f, c, 3, rng, padding=1))
        layers.append(ReluLayer(f"relu{i}"))
        c = f
    layers.append(SoftmaxXentLayer("loss"))
    return ModelGraph((3, 8, 8), layers)


def test_prune_step_all_layers_at_floor():
    rng = np.random.default_rng(7)
    g = three_conv_graph(rng, filters=(4, 4, 4))
    cfg = PruneConfig(ratio=0.10, method=RankMethod.AREA, metric=Metric.L2, min_filters=4)
    g2, report = prune_step(g, cfg, 1)
    assert report.conv_params_before == report.conv_params_after
    assert report.reduction_percent == 0.0
    assert all(r.pruned_indices == () for r in report.layers)
    assert conv_param_count(g2) == conv_param_count(g)


def test_prune_step_single_layer_floor_of_ratio():
    rng = np.random.default_rng(8)
    g = ModelGraph(
        (3, 8, 8),
        [he_conv("conv1", 32, 3, 3, rng, padding=1), SoftmaxXentLayer("loss")],
    )
    cfg = PruneConfig(ratio=0.10, method=RankMethod.AREA, metric=Metric.L2, min_filters=4)
    g2, report = prune_step(g, cfg, 1)
    (rec,) = report.layers
    assert len(rec.pruned_indices) == 3  # floor(3.2)
    assert rec.filters_after == 29
    assert g2.layer("conv1").weights.out_ch == 29


def test_prune_step_noop_after_prune_epochs():
    rng = np.random.default_rng(9)
    g = three_conv_graph(rng)
    cfg = PruneConfig(prune_epochs=2)
    g2, report = prune_step(g, cfg, 3)
    assert g2 is not None and report.conv_params_after == report.conv_params_before
    assert all(r.pruned_indices == () for r in report.layers)


def test_prune_step_schedule_matches_simulation():
    rng = np.random.default_rng(10)
    filters = (16, 24, 32)
    g = three_conv_graph(rng, filters=filters)
    cfg = PruneConfig(
        ratio=0.10,
        method=RankMethod.AREA,
        metric=Metric.L2,
        min_filters=4,
        ratio_base=RatioBase.CURRENT,
        prune_epochs=5,
    )
    epochs = 5
    per_layer = {name: [] for name in ("conv1", "conv2", "conv3")}
    params_after = []
    for epoch in range(1, epochs + 1):
        g, report = prune_step(g, cfg, epoch)
        for rec in report.layers:
            per_layer[rec.layer_id].append(rec.filters_after)
        params_after.append(report.conv_params_after)
        assert report.conv_params_after == conv_param_count(g)

    for i, name in enumerate(("conv1", "conv2", "conv3")):
        want = ref_schedule(filters[i], 0.10, epochs, 5, 4)
        assert per_layer[name] == want

    counts = [ref_schedule(f, 0.10, epochs, 5, 4) for f in filters]
    for e in range(epochs):
        chain = [counts[0][e], counts[1][e], counts[2][e]]
        assert params_after[e] == ref_chain_params(chain, 3, 3)


def test_prune_step_monotone_and_bookkeeping_exact():
    rng = np.random.default_rng(11)
    g = three_conv_graph(rng)
    cfg = PruneConfig(ratio=0.2, method=RankMethod.GREEDY, metric=Metric.CITYBLOCK)
    prev = conv_param_count(g)
    for epoch in range(1, 6):
        before = conv_param_count(g)
        g, report = prune_step(g, cfg, epoch)
        after = conv_param_count(g)
        assert report.conv_params_before == before
        assert report.conv_params_after == after
        assert report.reduction_percent == 100.0 * (1.0 - after / before)
        assert sum(r.params_before for r in report.layers) == before
        assert sum(r.params_after for r in report.layers) == after
        assert after <= prev
        prev = after
        g.validate()


def test_prune_step_original_ratio_base():
    rng = np.random.default_rng(12)
    g = ModelGraph(
        (3, 8, 8),
        [he_conv("conv1", 40, 3, 3, rng, padding=1), SoftmaxXentLayer("loss")],
    )
    cfg = PruneConfig(ratio=0.10, ratio_base=RatioBase.ORIGINAL, prune_epochs=9)
    # floor(0.1*40) = 4 removed every epoch regardless of current count
    counts = []
    for epoch in range(1, 5):
        g, _ = prune_step(g, cfg, epoch)
        counts.append(g.layer("conv1").weights.out_ch)
    assert counts == [36, 32, 28, 24]


def test_prune_step_forward_still_runs():
    rng = np.random.default_rng(13)
    g = conv_dense_graph(rng, c1=8)
    cfg = PruneConfig(ratio=0.25, min_filters=2)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    for epoch in range(1, 4):
        g, _ = prune_step(g, cfg, epoch)
        logits, _ = forward(g, x)
        assert logits.shape == (2, 10)


# ---------------------------------------------------------------------------
# graph validation


def test_validate_catches_channel_mismatch():
    rng = np.random.default_rng(14)
    g = two_conv_graph(rng)
    bad = ConvLayer(
        "conv2b",
        Tensor4(rng.normal(size=(8, 5, 3, 3)).astype(np.float32)),
        np.zeros(8, dtype=np.float32),
    )
    g.layers[2] = bad
    with pytest.raises(StructureError):
        g.validate()


def test_validate_catches_dense_width_mismatch():
    rng = np.random.default_rng(15)
    g = conv_dense_graph(rng)
    g.layers[4] = DenseLayer(
        "fc1", Matrix(rng.normal(size=(10, 17)).astype(np.float32)), np.zeros(10, dtype=np.float32)
    )
    with pytest.raises(StructureError):
        g.validate()
