"""Dataset ingestion: IDX (MNIST) files and synthetic Gaussian blobs."""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

from .nn import Batch
from .rng import Purpose, stream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# spread calibrated once so plain SGD on a linear model lands in the 85-95% band
BLOB_SPREAD = 0.65


class IdxFormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, expected_magic: int, name: str = "idx") -> np.ndarray:
    """Parse an unsigned-byte IDX payload into an array of its declared shape."""
    if len(raw) < 4:
        raise IdxFormatError(f"{name}: truncated at byte offset {len(raw)} while reading magic")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{name}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IdxFormatError(f"{name}: truncated at byte offset {len(raw)} while reading dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    size = int(np.prod(dims))
    if len(raw) < end + size:
        raise IdxFormatError(
            f"{name}: truncated at byte offset {len(raw)}, expected {end + size} bytes for shape {dims}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=end).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Batch:
    """Load IDX image/label files (optionally gzipped). Pixels are scaled to [0, 1]."""
    images = parse_idx(_read_bytes(images_path), IMAGE_MAGIC, os.fspath(images_path))
    labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC, os.fspath(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise IdxFormatError(f"label {labels.max()} outside 0-9")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Batch(x, labels.astype(np.int64))


def write_idx(path, array: np.ndarray, compress: bool = False) -> None:
    """Write a uint8 array as IDX (3-D images get magic 0x803, 1-D labels 0x801)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise TypeError("IDX writer expects uint8 data")
    header = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def find_mnist(root) -> dict[str, tuple[Path, Path]]:
    """Locate train/test IDX pairs under ``root`` with the canonical names, gzipped or not."""
    root = Path(root)
    found = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        pair = []
        for kind in ("images-idx3-ubyte", "labels-idx1-ubyte"):
            for suffix in ("", ".gz"):
                p = root / f"{prefix}-{kind}{suffix}"
                if p.exists():
                    pair.append(p)
                    break
        if len(pair) == 2:
            found[split] = (pair[0], pair[1])
    return found


def take_subset(data: Batch, size: int, seed: int) -> Batch:
    """Deterministic random subset; size 0 or >= len keeps everything."""
    if size <= 0 or size >= len(data):
        return data
    idx = np.sort(stream(seed, Purpose.DATA, 1).permutation(len(data))[:size])
    return data.subset(idx)


def synthesize_blobs(
    n: int,
    classes: int = 10,
    dim: int = 20,
    spread: float = BLOB_SPREAD,
    seed: int = 0,
) -> tuple[Batch, Batch]:
    """Gaussian blobs around scaled simplex vertices; deterministic 80/20 train/test split.

    Class means are ``2 * e_k`` for the first ``classes`` coordinates, so every
    pair of means is 2*sqrt(2) apart. Labels cycle through the classes so each
    class has n // classes or one more sample.
    """
    if n < classes:
        raise ValueError("need at least one sample per class")
    if dim < classes:
        raise ValueError("dim must be >= classes to place the simplex")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = stream(seed, Purpose.DATA, 0)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    means = np.zeros((classes, dim))
    means[np.arange(classes), np.arange(classes)] = 2.0
    x = means[labels] + spread * rng.standard_normal((n, dim))
    n_train = int(round(0.8 * n))
    return Batch(x[:n_train], labels[:n_train]), Batch(x[n_train:], labels[n_train:])
