"""Datasets, class-incremental task streams and the herding exemplar memory."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from ._config import DTYPE

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXError(ValueError):
    """Base class for malformed IDX files."""


class WrongMagicError(IDXError):
    pass


class TruncatedFileError(IDXError):
    pass


class CountMismatchError(IDXError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def feature_shape(self):
        return tuple(self.x.shape[1:])

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------

def _read_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, expected_magic, path):
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: truncated header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise WrongMagicError(f"{path}: wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated header ({len(raw)} bytes)")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise TruncatedFileError(f"{path}: expected {need} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx_dataset(images_path, labels_path, num_classes=10, dtype=DTYPE) -> Dataset:
    """Parse an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}")
    x = images.astype(dtype) / dtype.type(255.0)
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images (N, H, W) and labels (N,) as big-endian IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">III", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def data_root(root=None):
    root = root or os.environ.get("CLBENCH_DATA")
    if not root:
        raise FileNotFoundError("no dataset root given; pass a path or set CLBENCH_DATA")
    return Path(root)


def _find(root, stem):
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        p = root / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem} not found under {root}")


def load_mnist(root=None):
    """(train, test) datasets from the standard MNIST IDX file names under ``root``."""
    root = data_root(root)
    out = []
    for split in ("train", "test"):
        img, lab = MNIST_FILES[split]
        out.append(load_idx_dataset(_find(root, img), _find(root, lab)))
    return tuple(out)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _class_means(num_classes, dim, rng):
    if dim >= num_classes:
        return np.eye(num_classes, dim)
    m = rng.normal(size=(num_classes, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def synth_blobs(num_classes, per_class, dim, seed, noise=0.15, shape=None, dtype=DTYPE) -> Dataset:
    """Gaussian clusters around unit-norm class means (one-hot when dim >= classes).

    Samples are grouped by class.  ``shape`` reshapes each feature vector, e.g.
    (1, 4, 4) for image-like toy inputs; its product must equal ``dim``.
    """
    rng = np.random.default_rng(seed)
    means = _class_means(num_classes, dim, rng)
    x = np.repeat(means, per_class, axis=0) + noise * rng.normal(size=(num_classes * per_class, dim))
    y = np.repeat(np.arange(num_classes), per_class)
    if shape is not None:
        if int(np.prod(shape)) != dim:
            raise ValueError(f"shape {shape} does not hold {dim} features")
        x = x.reshape((-1,) + tuple(shape))
    return Dataset(x.astype(dtype), y, num_classes)


def synth_train_test(num_classes, per_class, test_per_class, dim, seed, noise=0.15, shape=None):
    """Train and test sets drawn around the same class means."""
    full = synth_blobs(num_classes, per_class + test_per_class, dim, seed, noise, shape)
    pos = np.arange(len(full)) % (per_class + test_per_class)
    return full.subset(np.flatnonzero(pos < per_class)), full.subset(np.flatnonzero(pos >= per_class))


# ---------------------------------------------------------------------------
# task streams
# ---------------------------------------------------------------------------

@dataclass
class TaskStream:
    """K disjoint class groups over a train/test pair.

    Labels are remapped to their position in ``class_order`` so task k owns the
    contiguous logit range ``[k*N, (k+1)*N)``.
    """

    train: Dataset
    test: Dataset
    class_order: np.ndarray
    K: int
    order_seed: int
    train_idx: list = field(default_factory=list)
    test_idx: list = field(default_factory=list)

    @property
    def classes_per_task(self):
        return self.train.num_classes // self.K

    def task_classes(self, k):
        n = self.classes_per_task
        return list(range(k * n, (k + 1) * n))

    @property
    def class_partition(self):
        return [[int(c) for c in self.class_order[self.task_classes(k)]] for k in range(self.K)]

    def task_train(self, k):
        return self.train.subset(self.train_idx[k])

    def task_test(self, k):
        return self.test.subset(self.test_idx[k])

    def joint_test(self, k):
        """Test data of tasks 0..k."""
        return self.test.subset(np.concatenate(self.test_idx[: k + 1]))

    def task_of_label(self, labels):
        return np.asarray(labels) // self.classes_per_task


def split_tasks(train: Dataset, K: int, order_seed: int, test: Dataset | None = None) -> TaskStream:
    """Seeded class permutation cut into K contiguous chunks of num_classes / K classes."""
    c = train.num_classes
    if K < 1 or c % K:
        raise ValueError(f"{c} classes cannot be split into {K} equal tasks")
    test = test if test is not None else train
    order = np.random.RandomState(order_seed).permutation(c)
    remap = np.empty(c, dtype=np.int64)
    remap[order] = np.arange(c)
    tr = Dataset(train.x, remap[train.y], c)
    te = Dataset(test.x, remap[test.y], c)
    n = c // K
    train_idx = [np.flatnonzero((tr.y >= k * n) & (tr.y < (k + 1) * n)) for k in range(K)]
    test_idx = [np.flatnonzero((te.y >= k * n) & (te.y < (k + 1) * n)) for k in range(K)]
    return TaskStream(tr, te, order, K, order_seed, train_idx, test_idx)


# ---------------------------------------------------------------------------
# exemplar memory
# ---------------------------------------------------------------------------

def herding_select(features, m):
    """Indices of ``m`` rows chosen greedily so their running mean tracks the class mean."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError("features must be (n, d)")
    if not 0 <= m <= features.shape[0]:
        raise ValueError(f"cannot select {m} of {features.shape[0]} samples")
    if m == 0:
        return np.empty(0, dtype=np.int64)
    return kernels.herding_order(features, m)


def l2_normalize(f, eps=1e-12):
    f = np.asarray(f, dtype=np.float64)
    return f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), eps)


@dataclass
class ExemplarMemory:
    """Fixed-budget replay buffer: per class, train-set indices in herding order."""

    budget: int
    exemplars: dict = field(default_factory=dict)

    @property
    def classes_seen(self):
        return len(self.exemplars)

    def __len__(self):
        return int(sum(len(v) for v in self.exemplars.values()))

    def indices(self):
        if not self.exemplars:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([self.exemplars[c] for c in sorted(self.exemplars)])

    def quota(self, classes_seen):
        if classes_seen and self.budget < classes_seen:
            raise ValueError(f"memory budget {self.budget} cannot hold {classes_seen} classes")
        return self.budget // classes_seen if classes_seen else 0

    def reduce(self, per_class):
        for c in self.exemplars:
            self.exemplars[c] = self.exemplars[c][:per_class]


def memory_update(mem: ExemplarMemory, train: Dataset, new_classes, feature_extractor, batch_size=512):
    """Shrink old classes to the new quota (herding-order prefix) and herd the new classes.

    ``feature_extractor(x)`` maps a batch of inputs to penultimate features;
    features are L2-normalised before herding.
    """
    new_classes = [int(c) for c in new_classes if int(c) not in mem.exemplars]
    quota = mem.quota(mem.classes_seen + len(new_classes))
    mem.reduce(quota)
    for c in new_classes:
        idx = np.flatnonzero(train.y == c)
        if idx.size == 0:
            mem.exemplars[c] = idx
            continue
        feats = np.concatenate([feature_extractor(train.x[idx[i:i + batch_size]])
                                for i in range(0, idx.size, batch_size)])
        order = herding_select(l2_normalize(feats), min(quota, idx.size))
        mem.exemplars[c] = idx[order]
    return mem


def export_mlxtend_mnist(out_dir, test_per_class=100):
    """Write the 5,000-image MNIST sample bundled with ``mlxtend`` as IDX files.

    The last ``test_per_class`` images of each digit become the t10k split.
    Offline stand-in for the full MNIST download; needs the ``mlxtend`` extra.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = np.asarray(x).reshape(-1, 28, 28).round().astype(np.uint8)
    y = np.asarray(y).astype(np.uint8)
    train_idx, test_idx = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        train_idx.append(idx[:-test_per_class])
        test_idx.append(idx[-test_per_class:])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", np.concatenate(train_idx)), ("test", np.concatenate(test_idx))):
        img, lab = MNIST_FILES[split]
        write_idx(x[idx], y[idx], out / img, out / lab)
    return out
