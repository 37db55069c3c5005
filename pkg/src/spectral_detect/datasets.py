"""MNIST (IDX) and CIFAR-10 (binary batch) loaders, writers and synthetic images.

Loaders read already-extracted files and scale bytes by exactly ``1/255``.
Images come back as one ``(n, M, N, K)`` float64 array rather than a list of
:class:`~spectral_detect.image.Image` objects; ``dataset[i]`` gives one.
"""

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import Image
from .validation import readonly

__all__ = [
    "DatasetFormatError",
    "LabeledDataset",
    "dataset_dir",
    "load_mnist_idx",
    "load_mnist",
    "load_cifar10_binary",
    "load_cifar10",
    "write_idx",
    "write_cifar10_binary",
    "synthetic_low_rank",
]

IDX_UBYTE = 0x08
IDX_DOUBLE = 0x0E
CIFAR_RECORD = 1 + 3 * 1024
CIFAR_CLASSES = 10
DEFAULT_DATA_DIR = "/root/data"


class DatasetFormatError(ValueError):
    """A dataset file does not match its binary format."""


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    name: str
    checksum: str
    n_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError("images must be (n, M, N, K)")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return Image(self.images[i])

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, start, stop=None):
        sl = slice(start, stop)
        return LabeledDataset(self.images[sl], self.labels[sl], self.name, self.checksum,
                              self.n_classes)


def dataset_dir(path=None):
    """``path`` if given, else ``$DATASET_DIR``, else ``/root/data``."""
    return Path(path or os.environ.get("DATASET_DIR") or DEFAULT_DATA_DIR)


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def _parse_idx(data, expected_magic, what):
    if len(data) < 4:
        raise DatasetFormatError(f"{what}: file truncated in header")
    zero, dtype, ndim = struct.unpack_from(">HBB", data)
    magic = (dtype << 8) | ndim
    accepted = {expected_magic, (IDX_DOUBLE << 8) | (expected_magic & 0xFF)}
    if zero != 0 or magic not in accepted:
        raise DatasetFormatError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(data) < 4 + 4 * ndim:
        raise DatasetFormatError(f"{what}: file truncated in dimensions")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    itemsize = 1 if dtype == IDX_UBYTE else 8
    body = len(data) - 4 - 4 * ndim
    count = int(np.prod(dims))
    if body != count * itemsize:
        raise DatasetFormatError(
            f"{what}: expected {count * itemsize} data bytes for dims {dims}, found {body}"
        )
    offset = 4 + 4 * ndim
    if dtype == IDX_UBYTE:
        arr = np.frombuffer(data, np.uint8, count, offset)
    else:
        arr = np.frombuffer(data, ">f8", count, offset).astype(np.float64)
    return arr.reshape(dims), dtype


def load_mnist_idx(images_path, labels_path, name="mnist"):
    """Parse an IDX image file (magic ``0x803``) and label file (``0x801``).

    Byte images are scaled by ``1/255``. Files written by :func:`write_idx`
    with float64 payloads (type code ``0x0E``) are read as-is.
    """
    img_bytes, lbl_bytes = _read(images_path), _read(labels_path)
    images, dtype = _parse_idx(img_bytes, 0x0803, str(images_path))
    labels, _ = _parse_idx(lbl_bytes, 0x0801, str(labels_path))
    if len(images) != len(labels):
        raise DatasetFormatError(f"{len(images)} images but {len(labels)} labels")
    X = images / 255.0 if dtype == IDX_UBYTE else images
    if not (np.all(np.isfinite(X)) and X.min(initial=0) >= 0 and X.max(initial=0) <= 1):
        raise DatasetFormatError("pixel values outside [0, 1]")
    digest = hashlib.sha256(img_bytes + lbl_bytes).hexdigest()
    return LabeledDataset(readonly(X[..., None]), np.asarray(labels, dtype=np.int64), name, digest)


def load_mnist(split="train", data_dir=None):
    root = dataset_dir(data_dir) / "mnist"
    prefix = {"train": "train", "test": "t10k"}[split]
    return load_mnist_idx(root / f"{prefix}-images-idx3-ubyte",
                          root / f"{prefix}-labels-idx1-ubyte", name=f"mnist-{split}")


def load_cifar10_binary(paths, name="cifar10"):
    """Concatenate CIFAR-10 binary batch files into one dataset.

    Each record is a label byte followed by the R, G and B 32x32 planes.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks, h = [], hashlib.sha256()
    for p in paths:
        data = _read(p)
        if len(data) == 0 or len(data) % CIFAR_RECORD:
            raise DatasetFormatError(
                f"{p}: length {len(data)} is not a positive multiple of {CIFAR_RECORD}"
            )
        h.update(data)
        chunks.append(np.frombuffer(data, np.uint8).reshape(-1, CIFAR_RECORD))
    if not chunks:
        raise ValueError("no CIFAR-10 files given")
    rec = np.concatenate(chunks)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        bad = int(np.argmax(labels >= CIFAR_CLASSES))
        raise DatasetFormatError(f"record {bad}: label {labels[bad]} >= {CIFAR_CLASSES}")
    planes = rec[:, 1:].reshape(-1, 3, 32, 32)
    images = np.moveaxis(planes, 1, -1) / 255.0
    return LabeledDataset(readonly(images), labels, name, h.hexdigest())


def load_cifar10(split="train", data_dir=None):
    root = dataset_dir(data_dir) / "cifar-10-batches-bin"
    if split == "train":
        files = [root / f"data_batch_{i}.bin" for i in range(1, 6)]
    else:
        files = [root / "test_batch.bin"]
    return load_cifar10_binary(files, name=f"cifar10-{split}")


def write_idx(path, array, dtype="double"):
    """Write an IDX file. ``dtype="ubyte"`` rounds ``[0, 1]`` values to bytes;
    ``"double"`` keeps float64 values exactly. Integer label vectors are
    always written as bytes.
    """
    a = np.asarray(array)
    if np.issubdtype(a.dtype, np.integer):
        code, body = IDX_UBYTE, a.astype(np.uint8).tobytes()
    elif dtype == "ubyte":
        code, body = IDX_UBYTE, np.rint(np.clip(a, 0, 1) * 255).astype(np.uint8).tobytes()
    elif dtype == "double":
        code, body = IDX_DOUBLE, a.astype(">f8").tobytes()
    else:
        raise ValueError(f"unknown IDX dtype {dtype!r}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, a.ndim))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(body)


def write_cifar10_binary(path, images, labels):
    """Write ``(n, 32, 32, 3)`` images in ``[0, 1]`` as CIFAR-10 records.

    Values are rounded to bytes, so non-grid values do not round-trip.
    """
    X = np.asarray(images, dtype=np.float64)
    if X.shape[1:] != (32, 32, 3):
        raise ValueError(f"CIFAR-10 records hold 32x32x3 images, got {X.shape[1:]}")
    planes = np.rint(np.clip(np.moveaxis(X, -1, 1), 0, 1) * 255).astype(np.uint8)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None],
                          planes.reshape(len(X), -1)], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def synthetic_low_rank(M, N, K=1, rank=1, seed=None):
    """Seeded image whose channels each have rank at most ``rank``.

    Each channel is a sum of ``rank`` outer products of nonnegative random
    factors divided by its maximum, which keeps values in ``[0, 1]`` without
    adding a constant (that would raise the rank).
    """
    if not 1 <= rank <= min(M, N):
        raise ValueError(f"rank must lie in [1, {min(M, N)}], got {rank}")
    rng = np.random.default_rng(seed)
    chans = []
    for _ in range(K):
        a = rng.uniform(0.05, 1.0, (M, rank))
        b = rng.uniform(0.05, 1.0, (rank, N))
        c = a @ b
        chans.append(c / c.max())
    return Image(np.stack(chans, axis=-1))
