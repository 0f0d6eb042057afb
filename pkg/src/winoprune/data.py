"""Dataset ingestion: CIFAR-10 native binary files and a deterministic
synthetic generator, plus normalization, batching and light augmentation.

CIFAR-10 binary record layout: 1 label byte then 3072 pixel bytes
(channel-major R/G/B, each channel 32x32 row-major); 10000 records per
file, so every batch file is exactly 30,730,000 bytes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
RECORD_BYTES = 3073
RECORDS_PER_FILE = 10000
FILE_BYTES = RECORD_BYTES * RECORDS_PER_FILE
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


@dataclass
class Dataset:
    images: np.ndarray        # [N, 3, H, W] float32, standardized
    labels: np.ndarray        # [N] int64 in [0, num_classes)
    split: str
    mean: np.ndarray          # per-channel constants used to standardize
    std: np.ndarray
    num_classes: int = 10


class CifarFormatError(ValueError):
    pass


def _parse_records(raw: bytes, path: str, num_classes: int):
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) >= num_classes:
        bad = int(labels.max())
        raise CifarFormatError(f"{path}: label byte {bad} outside [0, {num_classes})")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)
    return pixels, labels


def standardize(pixels_u8: np.ndarray, mean, std) -> np.ndarray:
    """Scale bytes to [0,1] then standardize per channel."""
    mean = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
    return ((pixels_u8.astype(np.float32) / 255.0) - mean) / std


def unstandardize(images: np.ndarray, mean, std) -> np.ndarray:
    """Inverse of standardize, back to the [0,1] pixel scale."""
    mean = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
    return images * std + mean


def load_cifar10(directory, split: str, mean=CIFAR10_MEAN, std=CIFAR10_STD,
                 limit: int | None = None) -> Dataset:
    """Load the CIFAR-10 binary batches for a split ('train' or 'test').

    Every file must exist with the exact expected byte count; records are
    kept in file order.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    names = TRAIN_FILES if split == "train" else TEST_FILES
    all_pixels, all_labels = [], []
    for name in names:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing CIFAR-10 batch file: {path}")
        actual = os.path.getsize(path)
        if actual != FILE_BYTES:
            raise CifarFormatError(
                f"{path}: expected {FILE_BYTES} bytes, found {actual}")
        with open(path, "rb") as fh:
            pixels, labels = _parse_records(fh.read(), path, num_classes=10)
        all_pixels.append(pixels)
        all_labels.append(labels)
    pixels = np.concatenate(all_pixels)
    labels = np.concatenate(all_labels)
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]
    return Dataset(images=standardize(pixels, mean, std), labels=labels,
                   split=split, mean=np.asarray(mean, np.float32),
                   std=np.asarray(std, np.float32), num_classes=10)


def write_cifar10_binary(pixels_u8: np.ndarray, labels: np.ndarray, path: str):
    """Write records in the CIFAR-10 batch layout (pads or splits are the
    caller's concern; exactly 10000 records per file expected by the loader)."""
    if pixels_u8.dtype != np.uint8 or pixels_u8.shape[1:] != (3, 32, 32):
        raise ValueError("pixels must be uint8 [N, 3, 32, 32]")
    if len(pixels_u8) != len(labels):
        raise ValueError("pixel/label count mismatch")
    records = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = np.asarray(labels, dtype=np.uint8)
    records[:, 1:] = pixels_u8.reshape(len(labels), -1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def _class_templates(rng, classes: int, size: int) -> np.ndarray:
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if size % 4:
        raise ValueError("size must be divisible by 4")
    coarse = rng.normal(0.5, 0.22, size=(classes, 3, 4, 4))
    return np.kron(coarse, np.ones((size // 4, size // 4)))


def _sample_pixels(rng, templates, n: int, noise: float):
    labels = rng.integers(0, len(templates), size=n)
    images = templates[labels] + rng.normal(0.0, noise,
                                            size=(n,) + templates.shape[1:])
    pixels = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    return pixels, labels.astype(np.int64)


def synthetic_pixels(seed: int, classes: int = 10, n: int = 2048, size: int = 32,
                     noise: float = 0.16):
    """Deterministic class-conditional images as uint8 pixels.

    Each class owns a smooth random template (coarse 4x4 field upsampled);
    samples are template + Gaussian noise, quantized to bytes.  Classes
    are linearly separable at moderate noise, which is what the fast CI
    and desk-scale runs need.
    """
    rng = np.random.default_rng(seed)
    templates = _class_templates(rng, classes, size)
    return _sample_pixels(rng, templates, n, noise)


def synthetic_dataset(seed: int, classes: int = 10, n: int = 2048, size: int = 32,
                      noise: float = 0.16, mean=CIFAR10_MEAN, std=CIFAR10_STD) -> Dataset:
    """Standardized synthetic dataset; bit-identical for identical seeds."""
    pixels, labels = synthetic_pixels(seed, classes=classes, n=n, size=size, noise=noise)
    return Dataset(images=standardize(pixels, mean, std), labels=labels,
                   split=f"synthetic-{seed}", mean=np.asarray(mean, np.float32),
                   std=np.asarray(std, np.float32), num_classes=classes)


def write_synthetic_cifar10(directory, seed: int = 0, classes: int = 10,
                            noise: float = 0.16, chunk: int = 2500):
    """Write a complete synthetic dataset in the CIFAR-10 binary layout
    (5 train batches plus the test batch, 10000 records each).

    Class templates are shared across all files and everything is
    deterministic in the seed.  This is the desk-scale stand-in when the
    real CIFAR-10 binaries are not on disk (the library never downloads).
    """
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    templates = _class_templates(rng, classes, 32)
    for name in TRAIN_FILES + TEST_FILES:
        pixels = np.empty((RECORDS_PER_FILE, 3, 32, 32), dtype=np.uint8)
        labels = np.empty(RECORDS_PER_FILE, dtype=np.int64)
        for start in range(0, RECORDS_PER_FILE, chunk):
            count = min(chunk, RECORDS_PER_FILE - start)
            px, lb = _sample_pixels(rng, templates, count, noise)
            pixels[start: start + count] = px
            labels[start: start + count] = lb
        write_cifar10_binary(pixels, labels, os.path.join(directory, name))


def augment_batch(images: np.ndarray, rng) -> np.ndarray:
    """Random horizontal flip plus 4-pixel pad-and-crop (train only)."""
    out = images.copy()
    flip = rng.random(len(out)) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    pad = 4
    h, w = out.shape[2], out.shape[3]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offs = rng.integers(0, 2 * pad + 1, size=(len(out), 2))
    for k, (dy, dx) in enumerate(offs):
        out[k] = padded[k, :, dy: dy + h, dx: dx + w]
    return out
