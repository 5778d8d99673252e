"""Datasets: IDX files, seeded synthetic tasks and few-shot subsets."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


@dataclass
class ImageDataset:
    """Images (N, C, H, W) in float64, integer labels and stable example ids."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    ids: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels))
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes, self.ids[idx])


@dataclass
class SplitDataset:
    name: str
    train: ImageDataset
    val: ImageDataset
    test: ImageDataset

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


# ------------------------------------------------------------------ IDX files


def _read_header(raw: bytes, path, expect_magic: int, ndim: int) -> tuple[int, ...]:
    if len(raw) < 4 + 4 * ndim:
        raise IDXFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise IDXFormatError(f"{path}: bad magic, expected 0x{expect_magic:08x}, found 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])


def load_idx(image_path, label_path) -> ImageDataset:
    """Parse a big-endian IDX image/label pair; pixels are scaled to [0, 1]."""
    img_raw = Path(image_path).read_bytes()
    lab_raw = Path(label_path).read_bytes()
    count, rows, cols = _read_header(img_raw, image_path, IDX_IMAGES_MAGIC, 3)
    (lcount,) = _read_header(lab_raw, label_path, IDX_LABELS_MAGIC, 1)
    if count != lcount:
        raise IDXFormatError(f"count mismatch: {image_path} holds {count} images, {label_path} holds {lcount} labels")
    pixels = img_raw[16:]
    if len(pixels) < count * rows * cols:
        raise IDXFormatError(f"{image_path}: truncated payload ({len(pixels)} of {count * rows * cols} bytes)")
    if len(lab_raw) - 8 < count:
        raise IDXFormatError(f"{label_path}: truncated payload ({len(lab_raw) - 8} of {count} bytes)")
    images = np.frombuffer(pixels, dtype=np.uint8, count=count * rows * cols).reshape(count, 1, rows, cols)
    labels = np.frombuffer(lab_raw[8:], dtype=np.uint8, count=count).astype(np.int64)
    num_classes = int(labels.max()) + 1 if count else 1
    return ImageDataset(images.astype(np.float64) / 255.0, labels, num_classes)


def write_idx(image_path, label_path, images: np.ndarray, labels: Sequence[int]) -> None:
    """Write uint8 images (N, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(image_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    labels = np.asarray(labels, dtype=np.uint8)
    Path(label_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def fit_size(images: np.ndarray, size: int) -> np.ndarray:
    """Bring (N, C, H, W) images to size x size: zero-pad when smaller, resample when larger."""
    n, c, h, w = images.shape
    if (h, w) == (size, size):
        return images
    if h <= size and w <= size:
        out = np.zeros((n, c, size, size))
        top, left = (size - h) // 2, (size - w) // 2
        out[:, :, top : top + h, left : left + w] = images
        return out
    return ndimage.zoom(images, (1, 1, size / h, size / w), order=1)[:, :, :size, :size]


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class SynthSpec:
    """Class templates plus Gaussian pixel noise.

    Each class owns a fixed random template in [-amplitude, amplitude]; every
    example is its class template plus N(0, noise_sigma^2) noise per pixel.
    """

    classes: int = 10
    per_class: int = 40
    image_size: int = 16
    channels: int = 1
    noise_sigma: float = 0.6
    amplitude: float = 1.0
    seed: int = 0
    split: tuple = (0.5, 0.25, 0.25)

    def __post_init__(self) -> None:
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise ValueError("split fractions must be positive and sum to 1")


@dataclass(frozen=True)
class DatasetSpec:
    """Where a benchmark dataset comes from and how it is normalised."""

    name: str = "synthetic"
    source: str = "synthetic"
    synth: SynthSpec = field(default_factory=SynthSpec)
    image_path: Optional[str] = None
    label_path: Optional[str] = None
    split: tuple = (0.5, 0.25, 0.25)
    mean: float = 0.0
    std: float = 1.0
    seed: int = 0


def templates(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    shape = (spec.classes, spec.channels, spec.image_size, spec.image_size)
    return spec.amplitude * rng.uniform(-1.0, 1.0, size=shape)


def synth_dataset(spec: SynthSpec, name: str = "synthetic") -> SplitDataset:
    tmpl = templates(spec)
    rng = np.random.default_rng([spec.seed, 1])
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    images = tmpl[labels] + rng.normal(0.0, spec.noise_sigma, size=(len(labels),) + tmpl.shape[1:]) if spec.noise_sigma > 0 else tmpl[labels].copy()
    full = ImageDataset(images, labels, spec.classes)
    return split_stratified(full, spec.split, np.random.default_rng([spec.seed, 2]), name)


def split_stratified(ds: ImageDataset, fractions, rng: np.random.Generator, name: str) -> SplitDataset:
    parts: list[list[int]] = [[], [], []]
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        parts[0] += idx[:n_train].tolist()
        parts[1] += idx[n_train : n_train + n_val].tolist()
        parts[2] += idx[n_train + n_val :].tolist()
    train, val, test = (ds.subset(sorted(p)) for p in parts)
    return SplitDataset(name, train, val, test)


def build_dataset(spec: DatasetSpec, image_size: int) -> SplitDataset:
    if spec.source == "synthetic":
        split = synth_dataset(spec.synth, spec.name)
    elif spec.source == "idx":
        raw = load_idx(spec.image_path, spec.label_path)
        raw.images = fit_size(raw.images, image_size)
        split = split_stratified(raw, spec.split, np.random.default_rng(spec.seed), spec.name)
    else:
        raise ValueError(f"unknown dataset source {spec.source!r}")
    if spec.mean != 0.0 or spec.std != 1.0:
        for part in (split.train, split.val, split.test):
            part.images = (part.images - spec.mean) / spec.std
    return split


# ------------------------------------------------------------------ few-shot


@dataclass(frozen=True)
class FewShotSpec:
    shots_per_class: int = 5
    seeds: tuple = (0, 1, 2)


def few_shot_sample(ds: ImageDataset, k: int, seed: int) -> ImageDataset:
    """Exactly ``k`` examples per class, without replacement, by seeded shuffle."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(ds.num_classes):
        pool = np.flatnonzero(ds.labels == c)
        if len(pool) < k:
            raise ValueError(f"class {c} has {len(pool)} examples, fewer than k={k}")
        picks.append(rng.permutation(pool)[:k])
    return ds.subset(np.sort(np.concatenate(picks)))
