"""Dataset loading, the per-epoch label-noise protocol, and augmentation.

Supported sources: deterministic synthetic Gaussian blobs, IDX-format
image files (big-endian magic + dims + raw ubytes), and CSV with float
feature columns plus a trailing integer label column.

Label noise fixes one corrupted index set per run (from the partition
seed) and redraws those indices' labels uniformly every epoch from a
stream keyed by (partition seed, epoch).  True labels are never mutated.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"

_IDX_UBYTE = 0x08
_BLOBS_TAG = 0xB10B
_PARTITION_TAG = 0x9A27
_DRAW_TAG = 0xD4A8

DATASET_KINDS = ("synthetic-blobs", "mnist-subset", "csv")


@dataclass
class Dataset:
    name: str
    split: str  # "train" | "test"
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise DataError(f"{self.name}: {len(self.x)} examples vs {len(self.y)} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DataError(
                f"{self.name}: labels outside [0, {self.num_classes})"
            )

    def __len__(self):
        return len(self.y)

    @property
    def example_shape(self):
        return tuple(self.x.shape[1:])


@dataclass
class DatasetConfig:
    kind: str
    classes: int = 10
    # synthetic-blobs
    dim: int = 32
    train_size: int = 2000
    test_size: int = 2000
    seed: int = 7
    cluster_std: float = 3.0
    center_scale: float = 1.0
    # mnist-subset
    path: str = ""
    per_class: int = 100
    test_per_class: int = 0  # 0 = keep the whole test file
    # csv
    train_path: str = ""
    test_path: str = ""

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.classes < 2:
            raise ConfigError(f"need >= 2 classes, got {self.classes}")

    def to_json(self) -> dict:
        out = {"kind": self.kind, "classes": self.classes}
        if self.kind == "synthetic-blobs":
            out.update(
                dim=self.dim,
                train_size=self.train_size,
                test_size=self.test_size,
                seed=self.seed,
                cluster_std=self.cluster_std,
                center_scale=self.center_scale,
            )
        elif self.kind == "mnist-subset":
            out.update(path=self.path, per_class=self.per_class, test_per_class=self.test_per_class)
        else:
            out.update(train_path=self.train_path, test_path=self.test_path)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetConfig":
        return cls(**obj)


def make_blobs(cfg: DatasetConfig) -> tuple:
    """Equal-count Gaussian clusters; bitwise reproducible from the seed."""
    m, d = cfg.classes, cfg.dim
    for size, tag in ((cfg.train_size, "train"), (cfg.test_size, "test")):
        if size % m:
            raise ConfigError(f"blobs {tag}_size {size} not divisible by {m} classes")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _BLOBS_TAG]))
    centers = rng.normal(0.0, cfg.center_scale, size=(m, d))

    def draw(total, split):
        per = total // m
        xs = np.concatenate(
            [centers[k] + rng.normal(0.0, cfg.cluster_std, size=(per, d)) for k in range(m)]
        )
        ys = np.repeat(np.arange(m), per)
        order = rng.permutation(total)
        return Dataset("synthetic-blobs", split, xs[order], ys[order], m)

    return draw(cfg.train_size, "train"), draw(cfg.test_size, "test")


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (ubyte payload only)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    zero, dtype, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0 or dtype != _IDX_UBYTE:
        raise DataError(
            f"{path}: bad IDX magic {raw[:4].hex()} (want 0000 08 nn with ubyte payload)"
        )
    if not 1 <= ndim <= 3:
        raise DataError(f"{path}: unsupported IDX rank {ndim}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = int(np.prod(dims))
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header_end)
    if payload.size != expected:
        raise DataError(f"{path}: payload has {payload.size} bytes, dims say {expected}")
    return payload.reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (inverse of read_idx)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, _IDX_UBYTE, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _subsample_per_class(x, y, per_class, classes):
    keep = []
    counts = [0] * classes
    for i, label in enumerate(y):
        if counts[label] < per_class:
            counts[label] += 1
            keep.append(i)
    if min(counts) < per_class:
        raise DataError(
            f"per_class={per_class} requested but class counts are {counts}"
        )
    idx = np.array(keep)
    return x[idx], y[idx]


def load_mnist_subset(cfg: DatasetConfig) -> tuple:
    """Read the canonical IDX file quartet and subsample the train split."""
    root = cfg.path
    xs = read_idx(f"{root}/{TRAIN_IMAGES}")
    ys = read_idx(f"{root}/{TRAIN_LABELS}")
    xt = read_idx(f"{root}/{TEST_IMAGES}")
    yt = read_idx(f"{root}/{TEST_LABELS}")
    if xs.ndim != 3 or xt.ndim != 3:
        raise DataError(f"{root}: image files must be rank-3 IDX")
    x_train, y_train = _subsample_per_class(xs, ys, cfg.per_class, cfg.classes)
    x_test, y_test = xt, yt
    if cfg.test_per_class:
        x_test, y_test = _subsample_per_class(xt, yt, cfg.test_per_class, cfg.classes)

    def to_float(img):
        return img[:, None, :, :].astype(np.float64) / 255.0

    return (
        Dataset("mnist-subset", "train", to_float(x_train), y_train, cfg.classes),
        Dataset("mnist-subset", "test", to_float(x_test), y_test, cfg.classes),
    )


def _read_csv(path, classes, split):
    xs, ys = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty CSV") from None
        width = len(header)
        if width < 2:
            raise DataError(f"{path}: need at least one feature column plus the label")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: ragged row ({len(row)} of {width} columns)")
            try:
                xs.append([float(v) for v in row[:-1]])
                ys.append(int(row[-1]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return Dataset("csv", split, np.array(xs), np.array(ys), classes)


def load_csv(cfg: DatasetConfig) -> tuple:
    return (
        _read_csv(cfg.train_path, cfg.classes, "train"),
        _read_csv(cfg.test_path, cfg.classes, "test"),
    )


def load_dataset(cfg: DatasetConfig) -> tuple:
    """Returns (train, test); splits are disjoint by construction."""
    if cfg.kind == "synthetic-blobs":
        return make_blobs(cfg)
    if cfg.kind == "mnist-subset":
        return load_mnist_subset(cfg)
    return load_csv(cfg)


@dataclass
class NoiseSpec:
    level: float = 0.0
    partition_seed: int = 0
    exclude_true_class: bool = False

    def __post_init__(self):
        if not 0.0 <= self.level <= 1.0:
            raise ConfigError(f"noise level must be in [0, 1], got {self.level}")

    def to_json(self) -> dict:
        return {
            "level": self.level,
            "partition_seed": self.partition_seed,
            "exclude_true_class": self.exclude_true_class,
        }

    @classmethod
    def from_json(cls, obj) -> "NoiseSpec":
        return cls(**obj)


def corrupted_indices(spec: NoiseSpec, n: int) -> np.ndarray:
    """The fixed corrupted set: floor(level * n) indices, same for every epoch."""
    k = int(spec.level * n)
    rng = np.random.default_rng(np.random.SeedSequence([spec.partition_seed, _PARTITION_TAG]))
    return np.sort(rng.permutation(n)[:k])


def corrupt_labels(ds: Dataset, spec: NoiseSpec, epoch: int) -> np.ndarray:
    """This epoch's label view; storage labels stay untouched.

    Corrupted indices get independent uniform draws over the label set
    (optionally excluding the true class), deterministic in
    (partition seed, epoch).
    """
    if ds.split != "train":
        raise ConfigError(f"label noise applies to the train split only, got {ds.split!r}")
    labels = ds.y.copy()
    if spec.level == 0.0:
        return labels
    idx = corrupted_indices(spec, len(ds))
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.partition_seed, epoch, _DRAW_TAG])
    )
    m = ds.num_classes
    if spec.exclude_true_class:
        offsets = rng.integers(1, m, size=idx.size)
        labels[idx] = (labels[idx] + offsets) % m
    else:
        labels[idx] = rng.integers(0, m, size=idx.size)
    return labels


@dataclass
class AugmentPolicy:
    kind: str = "none"  # none | pad-crop | flip
    pad: int = 2

    def __post_init__(self):
        if self.kind not in ("none", "pad-crop", "flip"):
            raise ConfigError(f"unknown augment policy {self.kind!r}")
        if self.pad < 0:
            raise ConfigError(f"pad must be >= 0, got {self.pad}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "pad": self.pad}

    @classmethod
    def from_json(cls, obj) -> "AugmentPolicy":
        return cls(**obj)


def augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Apply the policy to one NCHW batch (identity for kind 'none')."""
    if policy.kind == "none":
        return x
    if x.ndim != 4:
        raise ShapeError(f"augment {policy.kind!r} needs NCHW images, got shape {x.shape}")
    n, _, h, w = x.shape
    if policy.kind == "flip":
        out = x.copy()
        mask = rng.random(n) < 0.5
        out[mask] = out[mask, :, :, ::-1]
        return out
    p = policy.pad
    if p == 0:
        return x
    padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
    out = np.empty_like(x)
    for i in range(n):
        oi, oj = offsets[i]
        out[i] = padded[i, :, oi : oi + h, oj : oj + w]
    return out
