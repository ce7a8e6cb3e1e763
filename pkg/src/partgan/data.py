"""Datasets: IDX and CIFAR-10 binary readers/writers and synthetic generators.

All loaders return a :class:`Dataset` whose images are float64 arrays of shape
(m, C, H, W) scaled into [0, 1].
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SIDE = 32


class DataFormatError(ValueError):
    """Malformed dataset file."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    K: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (m, C, H, W), got shape {images.shape}")
        if images.shape[0] == 0:
            raise ValueError("dataset is empty")
        if labels.shape != (images.shape[0],):
            raise ValueError(f"{labels.shape[0]} labels for {images.shape[0]} images")
        if labels.min() < 0 or labels.max() >= self.K:
            raise ValueError(f"labels must lie in [0, {self.K})")
        if images.min() < 0 or images.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    @property
    def m(self) -> int:
        return self.images.shape[0]

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.K)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, expected_magic: int, what: str, path):
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: {what} file too short for a header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: bad {what} magic: expected 0x{expected_magic:08x}, found 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: {what} header truncated at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = math.prod(dims)
    if len(raw) - header < size:
        raise TruncatedFileError(
            f"{path}: {what} payload truncated: expected {size} bytes after offset {header}, found {len(raw) - header}"
        )
    if len(raw) - header > size:
        raise DataFormatError(f"{path}: {len(raw) - header - size} trailing bytes after {what} payload")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def read_idx(images_path, labels_path, pad_to: int | None = None, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label file pair (optionally gzip-compressed).

    Pixels are scaled by 1/255. With ``pad_to`` the images are zero-padded
    symmetrically (28x28 -> 32x32 for MNIST).
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images", images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels", labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    if pad_to is not None:
        x = _pad(x, pad_to)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(x, labels.astype(np.int64), k)


def _pad(x, size):
    h, w = x.shape[2:]
    if h > size or w > size:
        raise ValueError(f"cannot pad {h}x{w} images to {size}x{size}")
    top, left = (size - h) // 2, (size - w) // 2
    return np.pad(x, ((0, 0), (0, 0), (top, size - h - top), (left, size - w - left)))


def to_bytes(images) -> np.ndarray:
    return np.rint(np.asarray(images) * 255.0).astype(np.uint8)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a single-channel dataset as an uncompressed IDX pair."""
    m, c, h, w = dataset.images.shape
    if c != 1:
        raise ValueError("IDX images must have one channel")
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, m, h, w) + to_bytes(dataset.images[:, 0]).tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, m) + dataset.labels.astype(np.uint8).tobytes()
    )


def read_cifar_binary(paths, num_classes: int = 10) -> Dataset:
    """Read one or more CIFAR-10 binary batch files (3073-byte records)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            whole = len(raw) // CIFAR_RECORD
            raise TruncatedFileError(
                f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}; "
                f"incomplete record starts at byte offset {whole * CIFAR_RECORD}"
            )
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= num_classes:
        raise DataFormatError(f"label {labels.max()} outside [0, {num_classes})")
    images = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
    return Dataset(images, labels, num_classes)


def write_cifar_binary(dataset: Dataset, path) -> None:
    m, c, h, w = dataset.images.shape
    if (c, h, w) != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise ValueError("CIFAR records hold 3x32x32 images")
    records = np.empty((m, CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = dataset.labels
    records[:, 1:] = to_bytes(dataset.images).reshape(m, -1)
    Path(path).write_bytes(records.tobytes())


SHAPE_KINDS = ("square", "circle", "cross", "hbars", "vbars", "triangle", "diagonal", "ring")


@dataclass
class SyntheticSpec:
    """Desk-scale synthetic dataset description.

    Blob kinds draw points around per-class means (``means``, default evenly
    spaced) inside ``value_range`` and map that range affinely onto [0, 1].
    ``shape-images`` draws one jittered shape per class on a dark canvas.
    """

    kind: str = "shape-images"
    K: int = 4
    per_class_n: int = 64
    seed: int = 0
    means: list | None = None
    std: float = 0.1
    value_range: tuple = (-2.0, 2.0)
    image_size: int = 16
    noise: float = 0.05

    def __post_init__(self):
        if self.kind not in ("gaussian-blobs-1d", "gaussian-blobs-2d", "shape-images"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.K < 1 or self.per_class_n < 1:
            raise ValueError("K and per_class_n must be >= 1")
        if self.kind == "shape-images" and self.K > len(SHAPE_KINDS):
            raise ValueError(f"shape-images supports at most {len(SHAPE_KINDS)} classes, got K={self.K}")
        self.value_range = tuple(self.value_range)

    def class_means(self) -> np.ndarray:
        """Per-class means in the generation space (before mapping)."""
        if self.means is not None:
            means = np.asarray(self.means, dtype=np.float64)
            dim = 1 if self.kind == "gaussian-blobs-1d" else 2
            return means.reshape(self.K, dim)
        if self.kind == "gaussian-blobs-1d":
            return (np.linspace(-1.0, 1.0, self.K) if self.K > 1 else np.zeros(1)).reshape(-1, 1)
        angles = 2 * np.pi * np.arange(self.K) / self.K
        return np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def to_pixel(self, x):
        lo, hi = self.value_range
        return np.clip((np.asarray(x) - lo) / (hi - lo), 0.0, 1.0)


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(spec.K), spec.per_class_n)
    if spec.kind == "shape-images":
        images = np.stack([shape_image(SHAPE_KINDS[k], spec.image_size, rng, spec.noise) for k in labels])
        return Dataset(images[:, None], labels, spec.K)
    means = spec.class_means()
    points = means[labels] + spec.std * rng.standard_normal((labels.size, means.shape[1]))
    images = spec.to_pixel(points).reshape(labels.size, 1, 1, means.shape[1])
    return Dataset(images, labels, spec.K)


def shape_image(kind: str, size: int, rng, noise: float = 0.05) -> np.ndarray:
    """One ``size``x``size`` image of a jittered shape, values in [0, 1]."""
    cy, cx = (size - 1) / 2 + rng.uniform(-1, 1, size=2)
    r = size * rng.uniform(0.28, 0.38)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    box = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    arm = max(1.0, size / 12)
    if kind == "square":
        mask = box
    elif kind == "circle":
        mask = dx**2 + dy**2 <= r**2
    elif kind == "cross":
        mask = box & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    elif kind == "hbars":
        mask = box & (np.floor((dy + r) / 2) % 2 == 0)
    elif kind == "vbars":
        mask = box & (np.floor((dx + r) / 2) % 2 == 0)
    elif kind == "triangle":
        mask = box & (np.abs(dx) <= (dy + r) / 2)
    elif kind == "diagonal":
        mask = box & (np.abs(dx - dy) <= arm)
    elif kind == "ring":
        dist = np.sqrt(dx**2 + dy**2)
        mask = (dist <= r) & (dist >= r - 1.5 * arm)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    img = mask * rng.uniform(0.8, 1.0) + noise * rng.standard_normal((size, size))
    return np.clip(img, 0.0, 1.0)
