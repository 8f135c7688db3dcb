"""Dataset ingestion (IDX files) and synthetic dataset generation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["LabeledDataset", "IdxFormatError", "load_idx", "load_idx_images",
           "save_idx", "save_idx_images", "synth_dataset"]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file (bad magic, truncation, or count mismatch)."""


@dataclass
class LabeledDataset:
    """Images (N, 1, H, W) float32 in [0, 1] plus integer labels in [0, m)."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise IdxFormatError(
                f"count mismatch: {len(self.images)} images vs "
                f"{len(self.labels)} labels")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.images)


def _read_be32(f, path: Path, what: str) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise IdxFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack(">i", data)[0]


def load_idx(images_path: str | Path, labels_path: str | Path,
             split: str = "train") -> LabeledDataset:
    """Load an IDX image/label file pair, scaling pixels by 1/255."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic {magic:#010x} "
                f"(expected {IDX_IMAGE_MAGIC:#010x})")
        count = _read_be32(f, images_path, "count")
        rows = _read_be32(f, images_path, "rows")
        cols = _read_be32(f, images_path, "cols")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise IdxFormatError(f"{images_path}: truncated pixel data "
                                 f"({len(raw)} of {count * rows * cols} bytes)")
    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic {magic:#010x} "
                f"(expected {IDX_LABEL_MAGIC:#010x})")
        label_count = _read_be32(f, labels_path, "count")
        raw_labels = f.read(label_count)
        if len(raw_labels) != label_count:
            raise IdxFormatError(f"{labels_path}: truncated label data")
    if count != label_count:
        raise IdxFormatError(
            f"count mismatch: {count} images ({images_path.name}) vs "
            f"{label_count} labels ({labels_path.name})")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    images = (images.astype(np.float32) / 255.0)
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(images=images, labels=labels, split=split)


def load_idx_images(images_path: str | Path) -> np.ndarray:
    """Load just an IDX image file; returns (N, 1, H, W) float32 in [0, 1]."""
    images_path = Path(images_path)
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad image magic {magic:#010x} "
                f"(expected {IDX_IMAGE_MAGIC:#010x})")
        count = _read_be32(f, images_path, "count")
        rows = _read_be32(f, images_path, "rows")
        cols = _read_be32(f, images_path, "cols")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise IdxFormatError(f"{images_path}: truncated pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)
    return images.astype(np.float32) / 255.0


def save_idx_images(images: np.ndarray, images_path: str | Path) -> None:
    """Write an IDX image file from (N, 1, H, W) float32 pixels in [0, 1]."""
    n, _, rows, cols = images.shape
    pixels = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())


def save_idx(dataset: LabeledDataset, images_path: str | Path,
             labels_path: str | Path) -> None:
    """Write a dataset as an IDX image/label file pair (pixels scaled to u8)."""
    n, _, rows, cols = dataset.images.shape
    pixels = np.clip(np.round(dataset.images * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def synth_dataset(kind: str, n: int, classes: int, image_side: int,
                  seed: int) -> LabeledDataset:
    """Deterministic synthetic dataset separable by a small conv net.

    ``gaussian_blobs`` places one Gaussian bump per class on a grid;
    ``striped_patterns`` uses class-dependent stripe period and orientation.
    Per-pixel Gaussian noise sigma = 0.05 in both cases.
    """
    if n < classes:
        raise ValueError(f"n ({n}) must be >= classes ({classes})")
    if image_side < 4:
        raise ValueError(f"image_side ({image_side}) must be >= 4")
    if kind not in ("gaussian_blobs", "striped_patterns"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    images = np.zeros((n, 1, image_side, image_side), dtype=np.float32)
    yy, xx = np.mgrid[0:image_side, 0:image_side].astype(np.float32)
    grid = int(np.ceil(np.sqrt(classes)))
    for i, c in enumerate(labels):
        if kind == "gaussian_blobs":
            cy = (c // grid + 0.5) * image_side / grid
            cx = (c % grid + 0.5) * image_side / grid
            sigma = image_side / (2.5 * grid)
            base = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        else:
            period = 2.0 + 1.5 * (c // 2)
            axis = yy if c % 2 == 0 else xx
            base = 0.5 + 0.5 * np.sin(2 * np.pi * axis / period)
        noisy = base + rng.normal(0.0, 0.05, size=base.shape)
        images[i, 0] = np.clip(noisy, 0.0, 1.0)
    return LabeledDataset(images=images, labels=labels.astype(np.int64),
                          split="train")
