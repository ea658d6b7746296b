"""Dataset loading: IDX (MNIST), amat (MNIST variants) and synthetic clusters."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class AmatParseError(DataError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    split: str = ""

    def __post_init__(self):
        if self.images.ndim != 2:
            raise DataError(f"images must be 2-D, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataError("pixel values must lie in [0, 1]")
        if self.labels.size and self.labels.min() < 0:
            raise DataError("labels must be non-negative")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx, split: Optional[str] = None) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.name, split or self.split)

    def split_at(self, n_train: int, seed: int = 0) -> Tuple[Dataset, Dataset]:
        """Seeded shuffle, then the first ``n_train`` samples train and the rest test."""
        perm = np.random.default_rng(seed).permutation(len(self))
        return self.subset(perm[:n_train], "train"), self.subset(perm[n_train:], "test")


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    got = struct.unpack_from(">I", raw, 0)[0]
    if got != magic:
        raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise TruncatedFileError(f"{path}: truncated dimension header")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) < count:
        raise TruncatedFileError(f"{path}: expected {count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count).reshape(dims)


def load_idx(image_path, label_path, name: str = "mnist") -> Dataset:
    """Load an IDX image/label pair (optionally gzipped); pixels are scaled by 1/255."""
    images = _parse_idx(_read_bytes(image_path), IMAGE_MAGIC, image_path)
    labels = _parse_idx(_read_bytes(label_path), LABEL_MAGIC, label_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(flat, labels.astype(np.int64), name)


def write_idx(image_path, label_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(N, rows, cols)`` and labels ``(N,)`` as IDX; ``.gz`` paths are gzipped."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.ndim != 1:
        raise DataError("IDX images must be (N, rows, cols) and labels (N,)")

    def emit(path, magic, arr):
        # the low magic byte is the dimension count: 3 for images, 1 for labels
        head = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
        data = head + arr.tobytes()
        if str(path).endswith(".gz"):
            data = gzip.compress(data, mtime=0)
        Path(path).write_bytes(data)

    emit(image_path, IMAGE_MAGIC, images)
    emit(label_path, LABEL_MAGIC, labels)


def load_amat(path, name: str = "amat") -> Dataset:
    """Whitespace-separated rows: pixel values followed by the label."""
    rows, labels = [], []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                vals = [float(t) for t in tokens]
            except ValueError as exc:
                raise AmatParseError(path, lineno, f"non-numeric token ({exc})") from None
            if width is None:
                width = len(vals)
                if width < 2:
                    raise AmatParseError(path, lineno, "need at least one pixel and a label")
            elif len(vals) != width:
                raise AmatParseError(path, lineno, f"ragged row: {len(vals)} columns, expected {width}")
            label = vals[-1]
            if label != int(label) or label < 0:
                raise AmatParseError(path, lineno, f"label {label} is not a non-negative integer")
            rows.append(vals[:-1])
            labels.append(int(label))
    if not rows:
        raise DataError(f"{path}: no samples")
    return Dataset(np.asarray(rows, dtype=np.float64), np.asarray(labels, dtype=np.int64), name)


def write_amat(path, ds: Dataset) -> None:
    with open(path, "w") as fh:
        for x, y in zip(ds.images, ds.labels):
            fh.write(" ".join(repr(float(v)) for v in x) + f" {int(y)}\n")


def synth(seed: int, n: int = 1000, d: int = 64, classes: int = 10,
          spread: float = 0.15, name: str = "synth") -> Dataset:
    """Gaussian clusters around random centres in the unit cube, clipped to [0, 1]."""
    if n <= 0 or d <= 0 or classes <= 0:
        raise ValueError("n, d and classes must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, 1.0, size=(classes, d))
    labels = rng.integers(0, classes, size=n)
    images = centers[labels] + rng.normal(0.0, spread, size=(n, d))
    return Dataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64), name)


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Shuffled minibatches; the sequence is fixed by the generator state."""
    perm = rng.permutation(len(ds))
    for i in range(0, len(ds), batch_size):
        idx = perm[i:i + batch_size]
        yield ds.images[idx], ds.labels[idx]
