"""CIFAR-10 binary ingestion and a procedural stand-in dataset.

Batch files hold 3073-byte records: 1 label byte followed by 1024 red,
1024 green and 1024 blue bytes, row-major 32x32. Pixels are normalized
to (x/255 - mean) / std per channel; the constants are configuration
shared with the trainer through weight-file metadata, not code.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .kernels import DTYPE
from .weights import CIFAR10_MEAN, CIFAR10_STD

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10


class DataFormatError(ValueError):
    """File does not follow the binary batch layout."""


class DataValueError(ValueError):
    """Structurally valid file with out-of-range content."""


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # 3x32x32 float32, normalized
    label: int

    def __post_init__(self):
        if self.pixels.shape != IMAGE_SHAPE:
            raise DataFormatError(f"pixels shape {self.pixels.shape}, expected {IMAGE_SHAPE}")
        if not np.all(np.isfinite(self.pixels)):
            raise DataValueError("non-finite pixel values")
        if not 0 <= self.label < NUM_CLASSES:
            raise DataValueError(f"label {self.label} outside 0..{NUM_CLASSES - 1}")


def decode_batch(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Raw record split: (n,3,32,32) uint8 pixels and (n,) uint8 labels."""
    if len(data) == 0 or len(data) % RECORD_BYTES:
        raise DataFormatError(
            f"file size {len(data)} is not a positive multiple of {RECORD_BYTES}")
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0]
    if labels.max(initial=0) >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise DataValueError(f"record {bad}: label byte {labels[bad]} > {NUM_CLASSES - 1}")
    pixels = records[:, 1:].reshape(-1, *IMAGE_SHAPE)
    return pixels, labels


def normalize(pixels_u8: np.ndarray, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> np.ndarray:
    mean_arr = np.asarray(mean, dtype=DTYPE).reshape(-1, 1, 1)
    std_arr = np.asarray(std, dtype=DTYPE).reshape(-1, 1, 1)
    return ((pixels_u8.astype(DTYPE) / DTYPE(255.0)) - mean_arr) / std_arr


def load_cifar10(path, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> list[LabeledImage]:
    """Load one binary batch file in deterministic (file) order."""
    with open(path, "rb") as f:
        data = f.read()
    pixels, labels = decode_batch(data)
    normalized = normalize(pixels, mean, std)
    return [LabeledImage(normalized[i], int(labels[i])) for i in range(len(labels))]


def load_cifar10_dir(path, split: str = "test", mean=CIFAR10_MEAN,
                     std=CIFAR10_STD) -> list[LabeledImage]:
    """Load the standard batch files of one split from a directory."""
    if split == "train":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)]
    elif split == "test":
        names = ["test_batch.bin"]
    else:
        raise ValueError(f"unknown split {split!r}, expected 'train' or 'test'")
    images: list[LabeledImage] = []
    found = False
    for name in names:
        full = os.path.join(path, name)
        if os.path.exists(full):
            found = True
            images.extend(load_cifar10(full, mean, std))
    if not found:
        raise FileNotFoundError(f"no {split} batch files under {path}")
    return images


def write_batch(path, pixels_u8: np.ndarray, labels) -> None:
    """Write images back out in the binary batch layout."""
    labels = np.asarray(labels, dtype=np.uint8)
    if pixels_u8.shape[1:] != IMAGE_SHAPE or pixels_u8.dtype != np.uint8:
        raise DataFormatError(f"pixels must be (n,3,32,32) uint8, got "
                              f"{pixels_u8.shape} {pixels_u8.dtype}")
    if labels.shape != (pixels_u8.shape[0],):
        raise DataFormatError("labels length does not match image count")
    if labels.max(initial=0) >= NUM_CLASSES:
        raise DataValueError("label byte out of range")
    records = np.empty((pixels_u8.shape[0], RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = pixels_u8.reshape(pixels_u8.shape[0], -1)
    with open(path, "wb") as f:
        f.write(records.tobytes())


def synthetic_images(n: int, seed: int = 0, noise: float = 0.15,
                     class_count: int = NUM_CLASSES) -> tuple[np.ndarray, np.ndarray]:
    """Procedural labeled images in CIFAR-10 shape, uint8.

    Each class mixes a coarse color cast, an oriented luminance gradient and
    a fine stripe texture, so shallow features separate some classes while
    others need deeper ones. Deterministic for a given seed.
    """
    yy, xx = np.meshgrid(np.linspace(0, 1, 32), np.linspace(0, 1, 32), indexing="ij")
    images = np.zeros((n, 3, 32, 32), dtype=np.float64)
    labels = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        # child generator per index: image i depends only on (seed, i)
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        c = int(rng.integers(0, class_count))
        labels[i] = c
        base = np.zeros((3, 32, 32))
        # coarse color cast, unique pairing per class
        base[c % 3] += 0.35
        base[(c // 3) % 3] += 0.2
        # oriented gradient
        angle = np.pi * c / class_count
        grad = np.cos(angle) * xx + np.sin(angle) * yy
        base += 0.3 * grad
        # fine stripes whose frequency/axis depend on the class
        freq = 2 + (c % 5) * 2
        axis = xx if c % 2 else yy
        base += 0.18 * np.sin(2 * np.pi * freq * axis)
        base += rng.normal(0.0, noise, size=(3, 32, 32))
        images[i] = base
    # fixed affine mapping so an image never depends on the rest of the batch
    u8 = np.clip((images + 0.6) / 2.2 * 255, 0, 255).astype(np.uint8)
    return u8, labels


def synthetic_dataset(n: int, seed: int = 0, noise: float = 0.15,
                      mean=CIFAR10_MEAN, std=CIFAR10_STD) -> list[LabeledImage]:
    pixels, labels = synthetic_images(n, seed, noise)
    normalized = normalize(pixels, mean, std)
    return [LabeledImage(normalized[i], int(labels[i])) for i in range(n)]


def stratified_sample(dataset: list[LabeledImage], per_class: int,
                      seed: int = 0, class_count: int = NUM_CLASSES) -> list[LabeledImage]:
    """Seeded per-class subsample (the benchmark's 10-per-class protocol)."""
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for c in range(class_count):
        idx = [i for i, im in enumerate(dataset) if im.label == c]
        if len(idx) < per_class:
            raise ValueError(f"class {c} has only {len(idx)} samples, need {per_class}")
        pick = rng.choice(len(idx), size=per_class, replace=False)
        chosen.extend(idx[int(p)] for p in pick)
    return [dataset[i] for i in sorted(chosen)]
