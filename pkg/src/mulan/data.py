"""Data ingestion: CIFAR-10 binary loader and a seeded synthetic-shapes set.

The synthetic generator draws every image from its own counter-based stream,
so the dataset is identical no matter how generation is scheduled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError
from .rng import DOMAIN_DATA, stream

log = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 pixel bytes
SHAPE_CLASSES = ("disk", "square", "triangle", "cross")


@dataclass
class DatasetStats:
    """Per-channel mean/std over the training split."""
    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,)


@dataclass
class Dataset:
    """Images are float32 (N, 3, H, W) in [0, 1]; labels are int64 class ids."""
    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    n_classes: int
    stats: DatasetStats = field(default=None)

    def __post_init__(self):
        if self.stats is None:
            self.stats = compute_stats(self.train_images)


def compute_stats(images: np.ndarray, eps: float = 1e-6) -> DatasetStats:
    """Per-channel mean and std over every pixel of the given images."""
    if images.size == 0:
        raise DataFormatError("cannot compute statistics of an empty dataset")
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    degenerate = std < eps
    if degenerate.any():
        log.warning("constant channel(s) %s: std clamped to %g",
                    np.nonzero(degenerate)[0].tolist(), eps)
        std = np.maximum(std, eps)
    return DatasetStats(mean.astype(np.float32), std.astype(np.float32))


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------

def parse_cifar_records(raw: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR-10 binary records: label byte + R/G/B planes, 32x32 row-major."""
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise DataFormatError(
            f"file size {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        bad = int(np.argmax(records[:, 0] > 9))
        raise DataFormatError(f"record {bad}: label byte {labels[bad]} > 9")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return pixels, labels


def serialize_cifar_records(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of parse_cifar_records (bit-exact round trip)."""
    n = images.shape[0]
    out = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels.astype(np.uint8)
    out[:, 1:] = np.round(images * 255.0).astype(np.uint8).reshape(n, -1)
    return out.tobytes()


def load_cifar_binary(train_paths, val_path) -> Dataset:
    """Load CIFAR-10 binary batch files into a train/val dataset."""
    train_parts = []
    label_parts = []
    for path in train_paths:
        with open(path, "rb") as fh:
            px, lb = parse_cifar_records(fh.read())
        train_parts.append(px)
        label_parts.append(lb)
    with open(val_path, "rb") as fh:
        val_px, val_lb = parse_cifar_records(fh.read())
    return Dataset(
        train_images=np.concatenate(train_parts),
        train_labels=np.concatenate(label_parts),
        val_images=val_px,
        val_labels=val_lb,
        n_classes=10,
    )


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def _shape_mask(kind: str, size: int, cx: float, cy: float, s: float) -> np.ndarray:
    """Boolean mask of one shape with bounding-box side s centered at (cx, cy)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    half = s / 2.0
    if kind == "disk":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half ** 2
    if kind == "square":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    if kind == "triangle":
        # upward isoceles triangle inscribed in the s x s box
        inside_y = (yy >= cy - half) & (yy <= cy + half)
        t = (yy - (cy - half)) / s  # 0 at apex row, 1 at base row
        return inside_y & (np.abs(xx - cx) <= t * half)
    if kind == "cross":
        bar = s / 3.0
        horiz = (np.abs(yy - cy) <= bar / 2) & (np.abs(xx - cx) <= half)
        vert = (np.abs(xx - cx) <= bar / 2) & (np.abs(yy - cy) <= half)
        return horiz | vert
    raise ValueError(f"unknown shape kind {kind!r}")


def _hsv_color(rng: np.random.Generator) -> np.ndarray:
    """Saturated random color: uniform hue, full saturation and value."""
    h = rng.uniform(0.0, 6.0)
    i = int(h) % 6
    f = h - int(h)
    p, q, t = 0.0, 1.0 - f, f
    rgb = [(1.0, t, p), (q, 1.0, p), (p, 1.0, t),
           (p, q, 1.0), (t, p, 1.0), (1.0, p, q)][i]
    return np.array(rgb, dtype=np.float32)


def synth_shapes(seed: int, n_per_class: int, classes=SHAPE_CLASSES, size: int = 32,
                 noise_amplitude: float = 0.1, index_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Generate n_per_class images per shape class, fully determined by the seed.

    ``index_offset`` shifts the per-image stream addresses, letting callers
    draw disjoint splits (e.g. train vs val) from one seed.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    n = n_per_class * len(classes)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for idx in range(n):
        cls = idx % len(classes)
        rng = stream(seed, DOMAIN_DATA, idx + index_offset)
        base = 0.5 + rng.uniform(-noise_amplitude, noise_amplitude, (3, size, size))
        s = rng.uniform(0.25, 0.60) * size
        half = s / 2.0
        cx = rng.uniform(half, size - 1 - half)
        cy = rng.uniform(half, size - 1 - half)
        color = _hsv_color(rng)
        mask = _shape_mask(classes[cls], size, cx, cy, s)
        img = base.astype(np.float32)
        img[:, mask] = color[:, None]
        images[idx] = np.clip(img, 0.0, 1.0)
        labels[idx] = cls
    return images, labels


def make_synth_dataset(seed: int, n_train: int, n_val: int, size: int = 32,
                       classes=SHAPE_CLASSES,
                       noise_amplitude: float = 0.1) -> Dataset:
    """Balanced synthetic dataset with disjoint train and val streams."""
    k = len(classes)
    if n_train % k or n_val % k:
        raise ValueError(f"n_train and n_val must be multiples of {k} for exact balance")
    train_images, train_labels = synth_shapes(
        seed, n_train // k, classes, size, noise_amplitude)
    val_images, val_labels = synth_shapes(
        seed, n_val // k, classes, size, noise_amplitude, index_offset=1_000_000)
    return Dataset(train_images, train_labels, val_images, val_labels, n_classes=k)
