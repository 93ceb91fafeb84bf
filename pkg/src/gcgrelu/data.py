"""MNIST IDX ingestion, a synthetic pattern dataset, and mini-batch partitioning."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, ConfigError, CountMismatchError, DataError, TruncatedFileError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_COUNTS = {"train": 60000, "test": 10000}

FETCH_HINT = """\
MNIST files not found. Place the four uncompressed (or .gz) IDX files in one
directory and pass it with --data-dir or GRELU_DATA_DIR:
  train-images-idx3-ubyte  train-labels-idx1-ubyte
  t10k-images-idx3-ubyte   t10k-labels-idx1-ubyte
They are published at http://yann.lecun.com/exdb/mnist/ and mirrored by
many packages (e.g. the npm package "mnist-data" ships them under data/)."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N x 1 x H x W, values in [-1, 1]
    labels: np.ndarray  # N, int64
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, count: int) -> "Dataset":
        """The first ``count`` samples (the file order, no shuffling)."""
        return Dataset(self.images[:count], self.labels[:count], self.split)


def rescale_pixels(raw: np.ndarray) -> np.ndarray:
    """Map bytes 0..255 affinely onto [-1, 1]."""
    return raw.astype(np.float64) / 127.5 - 1.0


def _open(path: str):
    if not os.path.exists(path) and os.path.exists(path + ".gz"):
        path = path + ".gz"
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path: str, magic: int) -> np.ndarray:
    """Read an IDX file of unsigned bytes into an array of its declared shape."""
    with _open(path) as f:
        head = f.read(4)
        if len(head) < 4:
            raise TruncatedFileError(f"{path}: missing header")
        (got,) = struct.unpack(">I", head)
        if got != magic:
            raise BadMagicError(f"{path}: magic {got} != expected {magic}")
        ndim = got & 0xFF
        dims_raw = f.read(4 * ndim)
        if len(dims_raw) < 4 * ndim:
            raise TruncatedFileError(f"{path}: truncated dimension header")
        dims = struct.unpack(f">{ndim}I", dims_raw)
        expected = int(np.prod(dims))
        payload = f.read()
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes of data, found {len(payload)}")
    return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(dims)


def load_split(dir_path: str, split: str) -> Dataset:
    img_name, lbl_name = MNIST_FILES[split]
    raw = read_idx(os.path.join(dir_path, img_name), IMAGE_MAGIC)
    labels = read_idx(os.path.join(dir_path, lbl_name), LABEL_MAGIC)
    if raw.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{split}: {raw.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise DataError(f"{split}: label {labels.max()} outside 0..9")
    images = rescale_pixels(raw)[:, None, :, :]
    return Dataset(images, labels.astype(np.int64), split)


def load_mnist(dir_path: str) -> tuple[Dataset, Dataset]:
    """Load the standard train/test IDX files from ``dir_path``.

    Raises :class:`FileNotFoundError` if a file is missing and an
    :class:`~gcgrelu.errors.IngestionError` subclass for malformed content.
    No augmentation or other preprocessing besides the pixel rescale.
    """
    for names in MNIST_FILES.values():
        for name in names:
            p = os.path.join(dir_path, name)
            if not (os.path.exists(p) or os.path.exists(p + ".gz")):
                raise FileNotFoundError(f"{p} not found\n{FETCH_HINT}")
    return load_split(dir_path, "train"), load_split(dir_path, "test")


def write_idx(path: str, array: np.ndarray, magic: int) -> None:
    """Write unsigned bytes as an IDX file (used for fixtures and tests)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def class_pattern(label: int, class_count: int, size: int) -> np.ndarray:
    """Fixed template for one class: a bar through the center at its own angle.

    Brightness also steps with the label so the classes differ in both
    orientation and mean intensity.
    """
    coords = np.arange(size) - (size - 1) / 2
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    theta = np.pi * label / class_count
    dist = np.abs(-np.sin(theta) * xx + np.cos(theta) * yy)
    bar = np.exp(-(dist / (0.12 * size)) ** 2)
    level = 0.3 + 0.7 * (label + 1) / class_count
    return level * bar


def synth_blobs(class_count: int = 10, samples_per_class: int = 100, seed: int = 0,
                size: int = 28, noise: float = 0.3, split: str = "train") -> Dataset:
    """Deterministic class-template images plus seeded Gaussian noise, clipped to [-1, 1]."""
    if not 1 <= class_count <= 10:
        raise ConfigError(f"class_count must be in 1..10, got {class_count}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(class_count), samples_per_class)
    templates = np.stack([class_pattern(c, class_count, size) for c in range(class_count)])
    images = 2.0 * templates[labels] - 1.0
    images = images + noise * rng.standard_normal(images.shape)
    order = rng.permutation(len(labels))
    images = np.clip(images[order], -1.0, 1.0)[:, None]
    return Dataset(images, labels[order].astype(np.int64), split)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batches(dataset, size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffle the sample indices deterministically from (seed, epoch) and cut them into batches.

    ``dataset`` may be a :class:`Dataset` or a sample count.  A trailing
    batch of one sample is merged into the previous batch, since batch norm
    cannot train on a single sample.
    """
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if size < 2:
        raise ConfigError(f"batch size must be >= 2, got {size}")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    slices = [perm[i:i + size] for i in range(0, n, size)]
    if len(slices) > 1 and len(slices[-1]) == 1:
        tail = slices.pop()
        slices[-1] = np.concatenate([slices[-1], tail])
    return slices


class BatchIterator:
    """Iterate (images, labels) mini-batches of a dataset, one epoch per call."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0):
        if batch_size < 2:
            raise ConfigError(f"batch size must be >= 2, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0

    def __iter__(self):
        idx_list = batches(len(self.dataset), self.batch_size, self.seed, self.epoch)
        self.epoch += 1
        for idx in idx_list:
            yield self.dataset.images[idx], self.dataset.labels[idx]
