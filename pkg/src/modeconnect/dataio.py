"""Dataset loading: MNIST-style IDX files and seeded Gaussian blobs."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from modeconnect.ndmath.random import make_rng
from modeconnect.netcore import Dataset

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX payload with the expected magic number."""
    if len(raw) < 4:
        raise IdxError("file too short for a magic number", len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header + count:
        raise IdxError(f"truncated payload: need {count} bytes after the header", len(raw))
    if len(raw) > header + count:
        raise IdxError("trailing bytes after payload", header + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    """Images scaled to [0, 1] and flattened into a ``pixels x N`` matrix."""
    images = parse_idx(_read_bytes(images_path), IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(flat.T.copy(), labels.astype(np.int64), classes)


def write_idx(path, array: np.ndarray) -> None:
    """Write an unsigned-byte array as IDX (images if 3-D, labels if 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_mnist_dir(root, split: str = "train") -> Dataset:
    """MNIST split from a directory holding the standard (optionally gzipped) files."""
    root = Path(root)
    prefix = "train" if split == "train" else "t10k"
    def find(stem):
        for name in (stem, stem + ".gz"):
            if (root / name).exists():
                return root / name
        raise FileNotFoundError(root / stem)
    return load_idx(find(f"{prefix}-images-idx3-ubyte"), find(f"{prefix}-labels-idx1-ubyte"))


CENTER_DRAWS = 64


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 2
    dim: int = 2
    samples_per_class: int = 500
    std: float = 1.0
    seed: int = 0
    radius: float = 4.0

    def __post_init__(self):
        if self.classes < 1 or self.dim < 1 or self.samples_per_class < 1:
            raise ValueError(f"invalid synthetic spec {self}")
        if self.std < 0 or self.radius <= 0:
            raise ValueError(f"invalid synthetic spec {self}")


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """One Gaussian blob per class, centers at random points of a sphere.

    Of ``CENTER_DRAWS`` seeded center sets the best spread one is kept, so
    two classes do not land on top of each other.  Samples are interleaved
    in a seeded random order.
    """
    rng = make_rng(spec.seed)
    draws = rng.standard_normal((CENTER_DRAWS, spec.classes, spec.dim))
    draws *= spec.radius / np.linalg.norm(draws, axis=2, keepdims=True)
    if spec.classes > 1:
        gaps = [pdist(c).min() for c in draws]
        centers = draws[int(np.argmax(gaps))]
    else:
        centers = draws[0]
    n = spec.classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    points = centers[labels] + spec.std * rng.standard_normal((n, spec.dim))
    order = rng.permutation(n)
    return Dataset(points[order].T.copy(), labels[order], spec.classes)


def train_test_split(data: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    order = make_rng(seed).permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))
