"""Training loop for linear-chain CNNs with per-epoch structural pruning.

Forward convolution lowers to a single matrix multiply per layer via
im2col; backward reuses the cached column matrix for the weight gradient
and scatters the input gradient back with strided adds. Everything runs
in the dtype of the incoming batch, so the same code path serves fast
float32 training and the float64 mode the gradient checks rely on.
Losses and accuracies always accumulate in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .engine import (
    ConvLayer,
    DenseLayer,
    Deletion,
    FlattenLayer,
    MaxPoolLayer,
    ModelGraph,
    PruneConfig,
    PruneReport,
    ReluLayer,
    SoftmaxXentLayer,
    conv_param_count,
    prune_step,
)
from .errors import ShapeError, StaleCacheError
from .tensor_core import DTYPE, Matrix, Tensor4


# ---------------------------------------------------------------------------
# Low-level ops (dtype follows the input arrays)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Unroll conv input patches into a (C*kh*kw, B*OH*OW) column matrix."""
    b, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv output vanishes for input {x.shape}")
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    cols = np.empty((c, kh, kw, b, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, b * oh * ow), oh, ow


def _col2im(dcols, x_shape, kh, kw, stride, padding, oh, ow):
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    dc = dcols.reshape(c, kh, kw, b, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                dc[:, i, j].transpose(1, 0, 2, 3)
            )
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray, stride: int, padding: int):
    """im2col convolution; returns the output and the cached columns."""
    o, c, kh, kw = w.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv expects {c} channels, got {x.shape[1]}")
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    out = w.reshape(o, -1) @ cols  # (O, B*OH*OW)
    out += bias[:, None]
    b = x.shape[0]
    out = np.ascontiguousarray(out.reshape(o, b, oh, ow).transpose(1, 0, 2, 3))
    return out, cols


def conv_backward(dout, cols, w, x_shape, stride, padding):
    o, c, kh, kw = w.shape
    b, _, oh, ow = dout.shape
    d2 = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(o, b * oh * ow)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dcols = w.reshape(o, -1).T @ d2
    dx = _col2im(dcols, x_shape, kh, kw, stride, padding, oh, ow)
    return dx, dw, db


def maxpool_forward(x: np.ndarray, window: int, stride: int):
    b, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool output vanishes for input {x.shape}")
    if window == stride:
        xr = x[:, :, : oh * stride, : ow * stride]
        wf = np.ascontiguousarray(
            xr.reshape(b, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5)
        ).reshape(b, c, oh, ow, window * window)
    else:
        view = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
        wf = np.ascontiguousarray(view[:, :, ::stride, ::stride]).reshape(
            b, c, oh, ow, window * window
        )
    idx = wf.argmax(axis=-1)  # first max wins ties: deterministic
    out = np.take_along_axis(wf, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout, idx, x_shape, window, stride):
    b, c, h, w = x_shape
    _, _, oh, ow = dout.shape
    if window == stride:
        dwf = np.zeros((b, c, oh, ow, window * window), dtype=dout.dtype)
        np.put_along_axis(dwf, idx[..., None], dout[..., None], axis=-1)
        dxr = dwf.reshape(b, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape, dtype=dout.dtype)
        dx[:, :, : oh * window, : ow * window] = dxr.reshape(b, c, oh * window, ow * window)
        return dx
    # overlapping windows: scatter-add into flat spatial positions
    ki, kj = idx // window, idx % window
    rows = np.arange(oh)[None, None, :, None] * stride + ki
    colsp = np.arange(ow)[None, None, None, :] * stride + kj
    flat = rows * w + colsp
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    dx = np.zeros((b, c, h * w), dtype=dout.dtype)
    np.add.at(dx, (bi, ci, flat), dout)
    return dx.reshape(x_shape)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits.

    Always reduced in float64; the gradient is returned in the logits'
    own dtype.
    """
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    b = logits.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    nll = -(z[np.arange(b), labels] - np.log(e.sum(axis=1)))
    loss = float(nll.mean())
    dlogits = p.copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    return loss, dlogits.astype(logits.dtype)


# ---------------------------------------------------------------------------
# Graph-level forward / backward


@dataclass(eq=False)
class ForwardCache:
    """Per-layer activations saved by forward for the matching backward."""

    graph: ModelGraph
    logits: np.ndarray
    steps: list  # (layer, saved) in execution order

    def check(self, g: ModelGraph) -> None:
        if self.graph is not g:
            raise StaleCacheError(
                "backward called with a cache from a different forward/graph"
            )


def _layer_params(layer, params: Optional[dict], dtype):
    if params is not None and layer.name in params:
        w, b = params[layer.name]
        return np.asarray(w), np.asarray(b)
    return (
        layer.weights.data.astype(dtype, copy=False),
        layer.bias.astype(dtype, copy=False),
    )


def forward(
    g: ModelGraph, images: np.ndarray, params: Optional[dict] = None
) -> tuple[np.ndarray, ForwardCache]:
    """Run the chain on a batch, returning logits and the backward cache.

    ``params`` optionally overrides stored weights per layer name with
    arrays of any float dtype; passing float64 images plus float64
    params runs the whole network in 64-bit mode (used by the gradient
    checks).
    """
    x = np.asarray(images)
    if x.ndim != 4 or x.shape[1:] != g.input_shape:
        raise ShapeError(
            f"input batch must be (B, {', '.join(map(str, g.input_shape))}), "
            f"got {x.shape}"
        )
    steps = []
    for layer in g.layers:
        if isinstance(layer, ConvLayer):
            w, bias = _layer_params(layer, params, x.dtype)
            out, cols = conv_forward(x, w, bias, layer.stride, layer.padding)
            steps.append((layer, (x.shape, cols, w)))
            x = out
        elif isinstance(layer, ReluLayer):
            out = np.maximum(x, 0)
            steps.append((layer, out))
            x = out
        elif isinstance(layer, MaxPoolLayer):
            out, idx = maxpool_forward(x, layer.window, layer.stride)
            steps.append((layer, (x.shape, idx)))
            x = out
        elif isinstance(layer, FlattenLayer):
            steps.append((layer, x.shape))
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, DenseLayer):
            w, bias = _layer_params(layer, params, x.dtype)
            steps.append((layer, (x, w)))
            x = x @ w.T + bias
        elif isinstance(layer, SoftmaxXentLayer):
            steps.append((layer, None))
        else:  # pragma: no cover
            raise ShapeError(f"unknown layer kind {type(layer).__name__}")
    return x, ForwardCache(graph=g, logits=x, steps=steps)


def backward(g: ModelGraph, cache: ForwardCache, labels: np.ndarray) -> dict:
    """Gradients of the mean cross-entropy loss for every conv/dense layer.

    Returns {layer_name: (dweights, dbias)} in the dtype the forward ran in.
    """
    cache.check(g)
    _, dx = softmax_cross_entropy(cache.logits, labels)
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for layer, saved in reversed(cache.steps):
        if isinstance(layer, SoftmaxXentLayer):
            continue
        if isinstance(layer, DenseLayer):
            x_in, w = saved
            grads[layer.name] = (dx.T @ x_in, dx.sum(axis=0))
            dx = dx @ w
        elif isinstance(layer, FlattenLayer):
            dx = dx.reshape(saved)
        elif isinstance(layer, MaxPoolLayer):
            x_shape, idx = saved
            dx = maxpool_backward(dx, idx, x_shape, layer.window, layer.stride)
        elif isinstance(layer, ReluLayer):
            dx = dx * (saved > 0)
        elif isinstance(layer, ConvLayer):
            x_shape, cols, w = saved
            dx, dw, db = conv_backward(dx, cols, w, x_shape, layer.stride, layer.padding)
            grads[layer.name] = (dw, db)
    return grads


def evaluate(g: ModelGraph, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    """Classification accuracy in percent."""
    correct = 0
    for start in range(0, len(images), batch_size):
        xb = images[start : start + batch_size]
        yb = labels[start : start + batch_size]
        logits, _ = forward(g, xb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    return 100.0 * correct / len(images)


# ---------------------------------------------------------------------------
# Training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    hflip: bool = False
    prune: Optional[PruneConfig] = None


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    conv_params: int
    cumulative_reduction_percent: float


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.learning_rate
    for milestone in cfg.lr_decay_epochs:
        if epoch >= milestone:
            lr *= cfg.lr_decay_factor
    return lr


def _init_momentum(g: ModelGraph) -> dict:
    buffers = {}
    for layer in g.layers:
        if isinstance(layer, (ConvLayer, DenseLayer)):
            buffers[layer.name] = (
                np.zeros(layer.weights.data.shape, dtype=DTYPE),
                np.zeros(layer.bias.shape, dtype=DTYPE),
            )
    return buffers


def _prune_momentum(buffers: dict, directives: Iterable[Deletion]) -> None:
    for d in directives:
        vw, vb = buffers[d.layer]
        idx = list(d.indices)
        if d.axis == "conv_out":
            buffers[d.layer] = (np.delete(vw, idx, axis=0), np.delete(vb, idx))
        elif d.axis == "conv_in":
            buffers[d.layer] = (np.delete(vw, idx, axis=1), vb)
        elif d.axis == "dense_in":
            buffers[d.layer] = (np.delete(vw, idx, axis=1), vb)


def _sgd_update(g: ModelGraph, grads: dict, buffers: dict, lr: float, momentum: float, weight_decay: float) -> None:
    for layer in g.layers:
        if not isinstance(layer, (ConvLayer, DenseLayer)):
            continue
        dw, db = grads[layer.name]
        vw, vb = buffers[layer.name]
        w = layer.weights.data
        vw *= momentum
        vw += dw + weight_decay * w
        w -= lr * vw
        vb *= momentum
        vb += db  # no decay on biases
        layer.bias -= lr * vb


def train_prune(
    g: ModelGraph,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    cfg: TrainConfig,
    progress=None,
) -> tuple[ModelGraph, list[EpochRecord], list[PruneReport]]:
    """Train with SGD + momentum, pruning after each of the first
    ``cfg.prune.prune_epochs`` epochs (when pruning is configured).

    There is no finetuning phase: remaining epochs keep training the
    already-pruned network. ``progress``, if given, is called with each
    EpochRecord as it is produced. Fixed seeds give bit-identical runs.
    """
    rng = np.random.default_rng(cfg.seed)
    buffers = _init_momentum(g)
    original_params = conv_param_count(g)
    records: list[EpochRecord] = []
    reports: list[PruneReport] = []
    n = len(train_images)

    for epoch in range(1, cfg.epochs + 1):
        lr = _lr_at(cfg, epoch)
        perm = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            xb = train_images[sel]
            yb = train_labels[sel]
            if cfg.hflip:
                flip = rng.random(len(sel)) < 0.5
                xb = xb.copy()
                xb[flip] = xb[flip, :, :, ::-1]
            logits, cache = forward(g, xb)
            loss, _ = softmax_cross_entropy(logits, yb)
            grads = backward(g, cache, yb)
            _sgd_update(g, grads, buffers, lr, cfg.momentum, cfg.weight_decay)
            loss_sum += loss * len(sel)
            correct += int((logits.argmax(axis=1) == yb).sum())

        if cfg.prune is not None and epoch <= cfg.prune.prune_epochs:
            g, report = prune_step(g, cfg.prune, epoch)
            _prune_momentum(buffers, report.directives)
            reports.append(report)

        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / n,
            train_acc=100.0 * correct / n,
            test_acc=evaluate(g, test_images, test_labels, cfg.batch_size),
            conv_params=conv_param_count(g),
            cumulative_reduction_percent=100.0
            * (1.0 - conv_param_count(g) / original_params),
        )
        records.append(record)
        if progress is not None:
            progress(record)
    return g, records, reports


# ---------------------------------------------------------------------------
# Model builders


def he_conv(name: str, out_ch: int, in_ch: int, k: int, rng, stride: int = 1, padding: int = 0) -> ConvLayer:
    fan_in = in_ch * k * k
    w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (out_ch, in_ch, k, k))
    return ConvLayer(
        name,
        Tensor4(w.astype(DTYPE)),
        np.zeros(out_ch, dtype=DTYPE),
        stride=stride,
        padding=padding,
    )


def he_dense(name: str, out_f: int, in_f: int, rng) -> DenseLayer:
    w = rng.normal(0.0, math.sqrt(2.0 / in_f), (out_f, in_f))
    return DenseLayer(name, Matrix(w.astype(DTYPE)), np.zeros(out_f, dtype=DTYPE))


def vgg_mini(seed: int = 0, num_classes: int = 10, input_shape=(3, 32, 32)) -> ModelGraph:
    """Small VGG-style chain sized so CPU training finishes in minutes.

    conv(32)-relu-conv(32)-relu-pool / conv(64)-relu-conv(64)-relu-pool /
    flatten-dense(256)-relu-dense(classes).
    """
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers: list = [
        he_conv("conv1", 32, c, 3, rng, padding=1),
        ReluLayer("relu1"),
        he_conv("conv2", 32, 32, 3, rng, padding=1),
        ReluLayer("relu2"),
        MaxPoolLayer("pool1", 2, 2),
        he_conv("conv3", 64, 32, 3, rng, padding=1),
        ReluLayer("relu3"),
        he_conv("conv4", 64, 64, 3, rng, padding=1),
        ReluLayer("relu4"),
        MaxPoolLayer("pool2", 2, 2),
        FlattenLayer("flatten"),
    ]
    fh, fw = h // 4, w // 4
    layers += [
        he_dense("fc1", 256, 64 * fh * fw, rng),
        ReluLayer("relu5"),
        he_dense("fc2", num_classes, 256, rng),
        SoftmaxXentLayer("loss"),
    ]
    g = ModelGraph(input_shape, layers)
    g.validate()
    return g
