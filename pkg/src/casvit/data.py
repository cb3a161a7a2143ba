"""Synthetic shape classification data and its on-disk format.

Images are rendered procedurally: one of four glyph classes (circle,
square, cross, stripes) drawn with jittered center, size, and
intensity over a noisy background.  Classes are exactly balanced.

Files use a little-endian binary layout:

    magic   4 bytes  b"CVDS"
    version u16
    count   u32
    channels, height, width, num_classes   u16 each
    images  count*channels*height*width bytes, u8
    labels  count u16 entries

The loader validates the magic, version, and payload extent; a short
file reports exactly how many bytes are missing.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CVDS"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHHH")

SHAPE_CLASSES = ("circle", "square", "cross", "stripes")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # u8 [N, C, H, W]
    labels: np.ndarray  # u16 [N]
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DatasetError("images must be u8 with shape [N, C, H, W]")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError("one label per image required")
        if self.num_classes < 2:
            raise DatasetError("need at least two classes")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise DatasetError(f"label {int(self.labels.max())} out of range "
                               f"for {self.num_classes} classes")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes)

    def split(self, val_fraction: float, seed: int = 0):
        """Deterministic shuffled split into (train, val)."""
        if not 0.0 < val_fraction < 1.0:
            raise DatasetError("val_fraction must be inside (0, 1)")
        perm = np.random.default_rng(seed).permutation(len(self))
        n_val = max(1, int(round(len(self) * val_fraction)))
        return self.subset(perm[n_val:]), self.subset(perm[:n_val])


def preprocess(images: np.ndarray) -> np.ndarray:
    """u8 images to float32 in [-1, 1]."""
    return (images.astype(np.float32) / 255.0 - 0.5) / 0.5


# ---------------------------------------------------------------------------
# rendering

def _render(kind: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if kind == "circle":
        return (dx * dx + dy * dy <= r * r).astype(np.float64)
    if kind == "square":
        return ((np.abs(dx) <= r) & (np.abs(dy) <= r)).astype(np.float64)
    if kind == "cross":
        t = max(1.0, 0.35 * r)
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        arms = (np.abs(dx) <= t) | (np.abs(dy) <= t)
        return (inside & arms).astype(np.float64)
    if kind == "stripes":
        bar = max(2.0, 0.5 * r)
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        bands = (np.floor((yy - cy) / bar).astype(np.int64) % 2) == 0
        return (inside & bands).astype(np.float64)
    raise DatasetError(f"unknown shape class {kind!r}")


def generate_shapes(count: int, size: int = 32, channels: int = 3,
                    num_classes: int = 4, seed: int = 0, noise: float = 0.08,
                    jitter: float = 0.15) -> Dataset:
    """Balanced dataset of rendered glyphs.

    ``jitter`` moves each glyph center by up to that fraction of the
    image extent; sizes and intensities vary per sample.  Classes
    cycle deterministically, then the order is shuffled.
    """
    if not 2 <= num_classes <= len(SHAPE_CLASSES):
        raise DatasetError(f"num_classes must be 2..{len(SHAPE_CLASSES)}")
    if count < num_classes:
        raise DatasetError("need at least one sample per class")
    if count % num_classes:
        keep = count - count % num_classes
        warnings.warn(f"truncating {count} samples to {keep} "
                      f"to keep classes balanced")
        count = keep
    rng = np.random.default_rng(seed)
    images = np.zeros((count, channels, size, size), dtype=np.uint8)
    labels = (np.arange(count) % num_classes).astype(np.uint16)
    half = size / 2.0
    for i in range(count):
        kind = SHAPE_CLASSES[labels[i]]
        cx = half + rng.uniform(-jitter, jitter) * size
        cy = half + rng.uniform(-jitter, jitter) * size
        r = rng.uniform(0.25, 0.38) * size
        canvas = _render(kind, size, cx, cy, r) * rng.uniform(0.6, 1.0)
        canvas = canvas + rng.normal(0.0, noise, (size, size))
        canvas = np.clip(canvas, 0.0, 1.0)
        frame = np.round(canvas * 255.0).astype(np.uint8)
        images[i] = frame[None, :, :]
    perm = rng.permutation(count)
    return Dataset(images[perm], labels[perm], num_classes)


# ---------------------------------------------------------------------------
# serialization

def save_dataset(ds: Dataset, path) -> None:
    n, c, h, w = ds.images.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w, ds.num_classes))
        f.write(ds.images.tobytes())
        f.write(ds.labels.astype("<u2").tobytes())


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetError(f"truncated header: need {_HEADER.size} bytes, "
                           f"have {len(blob)}")
    magic, version, count, c, h, w, num_classes = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetError(f"unsupported version {version}, expected {VERSION}")
    img_bytes = count * c * h * w
    total = _HEADER.size + img_bytes + 2 * count
    if len(blob) < total:
        raise DatasetError(f"truncated payload: need {total} bytes, have "
                           f"{len(blob)} ({total - len(blob)} missing)")
    if len(blob) > total:
        raise DatasetError(f"{len(blob) - total} unexpected trailing bytes")
    images = np.frombuffer(blob, dtype=np.uint8, count=img_bytes,
                           offset=_HEADER.size).reshape(count, c, h, w).copy()
    labels = np.frombuffer(blob, dtype="<u2", count=count,
                           offset=_HEADER.size + img_bytes)
    labels = labels.astype(np.uint16)
    return Dataset(images, labels, num_classes)
