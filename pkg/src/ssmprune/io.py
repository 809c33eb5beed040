"""Checkpoint serialization and CIFAR-10 binary ingestion.

Checkpoints use a minimal self-contained binary layout so round-trips
are bit-exact and any language can parse them:

    "SSMP" | u32 version | u32 topo_len | topology JSON (utf-8)
    | u32 n_tensors | tensor records | u32 crc32 of everything before

A tensor record is u16 name_len | name | u8 ndim | ndim x u32 dims |
float32 little-endian data. All integers are little-endian.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .engine import (
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    MaxPoolLayer,
    ModelGraph,
    ReluLayer,
    SoftmaxXentLayer,
)
from .errors import (
    BadChecksumError,
    BadMagicError,
    CheckpointError,
    DatasetError,
    UnsupportedVersionError,
)
from .tensor_core import Matrix, Tensor4

MAGIC = b"SSMP"
FORMAT_VERSION = 1

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR_CLASSES = 10
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


# ---------------------------------------------------------------------------
# Checkpoints


def _topology(g: ModelGraph) -> dict:
    layers = []
    for l in g.layers:
        if isinstance(l, ConvLayer):
            layers.append(
                {
                    "kind": "conv",
                    "name": l.name,
                    "dims": list(l.weights.dims),
                    "stride": l.stride,
                    "padding": l.padding,
                    "original_filters": l.original_filters,
                }
            )
        elif isinstance(l, ReluLayer):
            layers.append({"kind": "relu", "name": l.name})
        elif isinstance(l, MaxPoolLayer):
            layers.append(
                {"kind": "maxpool", "name": l.name, "window": l.window, "stride": l.stride}
            )
        elif isinstance(l, FlattenLayer):
            layers.append({"kind": "flatten", "name": l.name})
        elif isinstance(l, DenseLayer):
            layers.append(
                {
                    "kind": "dense",
                    "name": l.name,
                    "dims": [l.weights.rows, l.weights.cols],
                }
            )
        elif isinstance(l, SoftmaxXentLayer):
            layers.append({"kind": "softmax_xent", "name": l.name})
        else:  # pragma: no cover
            raise CheckpointError(f"cannot serialize layer kind {type(l).__name__}")
    return {"input_shape": list(g.input_shape), "layers": layers}


def _tensors(g: ModelGraph) -> list[tuple[str, np.ndarray]]:
    out = []
    for l in g.layers:
        if isinstance(l, (ConvLayer, DenseLayer)):
            out.append((f"{l.name}.weight", l.weights.data))
            out.append((f"{l.name}.bias", l.bias))
    return out


def save_checkpoint(g: ModelGraph, path) -> None:
    """Write the graph to ``path``; load_checkpoint reproduces it bit-exactly."""
    topo = json.dumps(_topology(g), separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(topo)), topo]
    tensors = _tensors(g)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = b"".join(parts)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated mid-record")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> ModelGraph:
    """Read a checkpoint, verifying magic, checksum and format version."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path} is not a checkpoint (bad magic)")
    if len(data) < 12:
        raise BadChecksumError(f"{path} is truncated")
    stored = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored:
        raise BadChecksumError(f"{path} fails its integrity checksum")

    r = _Reader(data[:-4])
    r.take(4)  # magic
    version = r.u32()
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path} has format version {version}, expected {FORMAT_VERSION}"
        )
    topo = json.loads(r.take(r.u32()).decode("utf-8"))
    n_tensors = r.u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = r.take(r.u16()).decode("utf-8")
        ndim = r.u8()
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        arrays[name] = arr.astype(np.float32)

    layers: list = []
    for spec in topo["layers"]:
        kind, name = spec["kind"], spec["name"]
        try:
            if kind == "conv":
                w = arrays[f"{name}.weight"]
                if list(w.shape) != spec["dims"]:
                    raise CheckpointError(
                        f"{name}: tensor shape {w.shape} != topology {spec['dims']}"
                    )
                layers.append(
                    ConvLayer(
                        name,
                        Tensor4(w),
                        arrays[f"{name}.bias"],
                        stride=spec["stride"],
                        padding=spec["padding"],
                        original_filters=spec["original_filters"],
                    )
                )
            elif kind == "relu":
                layers.append(ReluLayer(name))
            elif kind == "maxpool":
                layers.append(MaxPoolLayer(name, spec["window"], spec["stride"]))
            elif kind == "flatten":
                layers.append(FlattenLayer(name))
            elif kind == "dense":
                w = arrays[f"{name}.weight"]
                if list(w.shape) != spec["dims"]:
                    raise CheckpointError(
                        f"{name}: tensor shape {w.shape} != topology {spec['dims']}"
                    )
                layers.append(DenseLayer(name, Matrix(w), arrays[f"{name}.bias"]))
            elif kind == "softmax_xent":
                layers.append(SoftmaxXentLayer(name))
            else:
                raise CheckpointError(f"unknown layer kind {kind!r} in topology")
        except KeyError as e:
            raise CheckpointError(f"missing tensor for layer {name}: {e}") from e
    g = ModelGraph(tuple(topo["input_shape"]), layers)
    g.validate()
    return g


# ---------------------------------------------------------------------------
# CIFAR-10 binary format


@dataclass(frozen=True)
class DatasetSpec:
    """Where the CIFAR-10 binary batches live and how much of them to load."""

    root: Path
    train_files: tuple[str, ...] = CIFAR_TRAIN_FILES
    test_files: tuple[str, ...] = CIFAR_TEST_FILES
    subset_size: Optional[int] = None
    test_subset_size: Optional[int] = None
    seed: int = 0


@dataclass(eq=False)
class Dataset:
    """Normalized images (N, 3, 32, 32) float32 plus labels and the
    per-channel train statistics that produced them."""

    images: np.ndarray
    labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


def _read_batch_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise DatasetError(f"dataset file missing: {path}")
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        raise DatasetError(
            f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}"
        )
    rec = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) >= CIFAR_CLASSES:
        raise DatasetError(f"{path}: label out of range (>= {CIFAR_CLASSES})")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)  # R,G,B planes as stored
    return images, labels


def _read_files(root: Path, names) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for name in names:
        im, lb = _read_batch_file(root / name)
        images.append(im)
        labels.append(lb)
    return np.concatenate(images), np.concatenate(labels)


def load_cifar10(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Load train/test splits, scale to [0,1] and normalize per channel.

    The normalization constants come from the loaded train subset (not
    global CIFAR statistics) so subset runs are self-consistent; the test
    split is normalized with the train constants. Subset selection is a
    seeded permutation, stable for a fixed seed.
    """
    root = Path(spec.root)
    train_u8, train_labels = _read_files(root, spec.train_files)
    test_u8, test_labels = _read_files(root, spec.test_files)

    rng = np.random.default_rng(spec.seed)
    if spec.subset_size is not None and spec.subset_size < len(train_u8):
        pick = rng.permutation(len(train_u8))[: spec.subset_size]
        train_u8, train_labels = train_u8[pick], train_labels[pick]
    if spec.test_subset_size is not None and spec.test_subset_size < len(test_u8):
        pick = rng.permutation(len(test_u8))[: spec.test_subset_size]
        test_u8, test_labels = test_u8[pick], test_labels[pick]

    train = train_u8.astype(np.float32) / 255.0
    test = test_u8.astype(np.float32) / 255.0
    mean = train.mean(axis=(0, 2, 3), dtype=np.float64)
    std = train.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.maximum(std, 1e-8)  # guard degenerate constant channels
    mean32 = mean.astype(np.float32)
    std32 = std.astype(np.float32)
    train = (train - mean32[:, None, None]) / std32[:, None, None]
    test = (test - mean32[:, None, None]) / std32[:, None, None]
    return (
        Dataset(train, train_labels, mean32, std32),
        Dataset(test, test_labels, mean32, std32),
    )
