"""Datasets: a seeded synthetic image classification set and an IDX-like reader.

File format (two files, all integers big-endian uint32).  As in IDX, the
magic's low byte is the number of dimensions and 0x08 marks unsigned bytes:

    images: magic 0x00000803, count, rows, cols, then uint8 pixels (grey)
            magic 0x00000804, count, channels, rows, cols, then uint8 pixels
    labels: magic 0x00000801, count, then uint8 labels

Pixels are scaled to [0, 1] by /255 on load, so an epsilon of ``2/255`` is one
grey level per step of 2.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

GREY_MAGIC = 0x00000803
IMAGE_MAGIC = 0x00000804
LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


class HeaderError(DataFormatError):
    pass


class TruncatedPayloadError(DataFormatError):
    pass


class LabelRangeError(DataFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray      # (count, C, H, W) in [0, 1]
    labels: np.ndarray      # (count,) int64
    classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataFormatError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise LabelRangeError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield ``(images, labels)`` minibatches, shuffled when ``rng`` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for s in range(0, len(self), batch_size):
            idx = order[s:s + batch_size]
            yield self.images[idx], self.labels[idx]

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], self.classes)


_SPLIT_OFFSET = {"train": 0, "test": 1, "val": 2}


def class_templates(classes: int, image_size: int, seed, channels: int = 3) -> np.ndarray:
    """Per-class base patterns: smoothed random fields in [0.15, 0.85]."""
    rng = np.random.default_rng([int(seed), 0])
    coarse = max(2, image_size // 4)
    base = rng.uniform(0.0, 1.0, size=(classes, channels, coarse, coarse))
    rep = -(-image_size // coarse)
    up = np.repeat(np.repeat(base, rep, axis=2), rep, axis=3)[:, :, :image_size, :image_size]
    return 0.15 + 0.7 * up


def synth_generate(classes: int, per_class: int, image_size: int, seed, channels: int = 3,
                   noise_std: float = 0.1, split: str = "train") -> Dataset:
    """Balanced set of seeded templates plus per-sample Gaussian noise, clamped to [0, 1].

    Templates depend only on ``seed``; the noise stream also depends on
    ``split`` so train and test share classes but not samples.  Samples are
    ordered class-major.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 0:
        raise ValueError("per_class must be non-negative")
    if split not in _SPLIT_OFFSET:
        raise ValueError(f"unknown split {split!r}")
    templates = class_templates(classes, image_size, seed, channels)
    rng = np.random.default_rng([int(seed), 1, _SPLIT_OFFSET[split]])
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    noise = rng.standard_normal((len(labels), channels, image_size, image_size)) * noise_std
    images = np.clip(templates[labels] + noise, 0.0, 1.0)
    return Dataset(images, labels, classes)


def _read_u32(blob: bytes, count: int, what: str):
    need = 4 * count
    if len(blob) < need:
        raise HeaderError(f"{what}: header needs {need} bytes, file has {len(blob)}")
    return struct.unpack(f">{count}I", blob[:need])


def parse_images(blob: bytes) -> np.ndarray:
    """``(count, channels, rows, cols)`` floats in [0, 1]."""
    (magic,) = _read_u32(blob, 1, "images")
    if magic == GREY_MAGIC:
        _, count, rows, cols = _read_u32(blob, 4, "images")
        channels, start = 1, 16
    elif magic == IMAGE_MAGIC:
        _, count, channels, rows, cols = _read_u32(blob, 5, "images")
        start = 20
    else:
        raise HeaderError(f"images: bad magic 0x{magic:08x}")
    size = count * channels * rows * cols
    payload = blob[start:]
    if len(payload) < size:
        raise TruncatedPayloadError(f"images: expected {size} pixel bytes, found {len(payload)}")
    if len(payload) > size:
        raise DataFormatError(f"images: {len(payload) - size} trailing bytes")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(count, channels, rows, cols)
    return raw.astype(np.float64) / 255.0


def parse_labels(blob: bytes) -> np.ndarray:
    magic, count = _read_u32(blob, 2, "labels")
    if magic != LABEL_MAGIC:
        raise HeaderError(f"labels: bad magic 0x{magic:08x}")
    payload = blob[8:]
    if len(payload) < count:
        raise TruncatedPayloadError(f"labels: expected {count} bytes, found {len(payload)}")
    if len(payload) > count:
        raise DataFormatError(f"labels: {len(payload) - count} trailing bytes")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def load_idx_like(images_path, labels_path, classes: int | None = None) -> Dataset:
    """Read an image/label file pair.

    ``classes`` defaults to ``max(label) + 1``; when given, labels at or above
    it raise ``LabelRangeError``.
    """
    with open(images_path, "rb") as fh:
        images = parse_images(fh.read())
    with open(labels_path, "rb") as fh:
        labels = parse_labels(fh.read())
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    if classes is None:
        classes = int(labels.max()) + 1 if labels.size else 0
    if labels.size and labels.max() >= classes:
        raise LabelRangeError(f"label {int(labels.max())} out of range for {classes} classes")
    return Dataset(images, labels, classes)


def quantize(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def save_idx_like(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset; pixels are rounded to the nearest of 256 grey levels."""
    count, c, h, w = dataset.images.shape
    if dataset.labels.size and dataset.labels.max() > 255:
        raise LabelRangeError("labels must fit in one byte")
    with open(images_path, "wb") as fh:
        if c == 1:
            fh.write(struct.pack(">4I", GREY_MAGIC, count, h, w))
        else:
            fh.write(struct.pack(">5I", IMAGE_MAGIC, count, c, h, w))
        fh.write(quantize(dataset.images).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", LABEL_MAGIC, count))
        fh.write(dataset.labels.astype(np.uint8).tobytes())
