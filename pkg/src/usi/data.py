"""Datasets: IDX and CSV ingestion, a seeded synthetic task, and eval-time resizing."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, K)
    num_classes: int
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetFormatError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.mean, self.std)

    def normalize(self, images: np.ndarray) -> np.ndarray:
        """Model-input standardization; stored images stay in [0, 1]."""
        if self.mean is None:
            return images
        mean = np.asarray(self.mean).reshape(1, -1, 1, 1)
        std = np.asarray(self.std).reshape(1, -1, 1, 1)
        return (images - mean) / std


# ---------------------------------------------------------------- IDX


def _parse_idx(buf: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(buf) < 4:
        raise DatasetFormatError(f"{what}: truncated magic at byte offset {len(buf)}")
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise DatasetFormatError(f"{what}: bad magic 0x{got:08x} at byte offset 0, expected 0x{magic:08x}")
    if len(buf) < header:
        raise DatasetFormatError(f"{what}: truncated header at byte offset {len(buf)}, need {header} bytes")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    count = math.prod(dims)
    end = header + count
    if len(buf) < end:
        raise DatasetFormatError(f"{what}: truncated payload at byte offset {len(buf)}, expected {end} bytes")
    if len(buf) > end:
        raise DatasetFormatError(f"{what}: {len(buf) - end} trailing bytes after byte offset {end}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def parse_idx_images(buf: bytes) -> np.ndarray:
    return _parse_idx(buf, IDX_IMAGES_MAGIC, 3, "images")


def parse_idx_labels(buf: bytes) -> np.ndarray:
    return _parse_idx(buf, IDX_LABELS_MAGIC, 1, "labels")


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    raw = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes()).astype(np.int64)
    if len(raw) != len(labels):
        raise DatasetFormatError(f"count mismatch: {len(raw)} images at byte offset 4, {len(labels)} labels at byte offset 4")
    images = raw.astype(np.float64)[:, None] / 255.0
    k = num_classes if num_classes is not None else max(int(labels.max()) + 1 if len(labels) else 2, 2)
    return Dataset(images, labels, k)


def encode_idx_images(images: np.ndarray) -> bytes:
    arr = np.asarray(images, dtype=np.uint8)
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, *arr.shape) + arr.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    arr = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, len(arr)) + arr.tobytes()


def save_idx(images_u8: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    Path(images_path).write_bytes(encode_idx_images(images_u8))
    Path(labels_path).write_bytes(encode_idx_labels(labels))


# ---------------------------------------------------------------- CSV


def load_csv(path, image_shape, num_classes: int | None = None) -> Dataset:
    """Rows of ``label,p0,p1,...``; pixels in [0, 1] or, if any exceeds 1, in [0, 255]."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    c, h, w = image_shape
    if rows.shape[1] != 1 + c * h * w:
        raise DatasetFormatError(f"expected {1 + c * h * w} columns, got {rows.shape[1]}")
    labels = rows[:, 0].astype(np.int64)
    pixels = rows[:, 1:]
    if pixels.max(initial=0.0) > 1.0:
        pixels = pixels / 255.0
    images = np.clip(pixels, 0.0, 1.0).reshape(-1, c, h, w)
    k = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    return Dataset(images, labels, k)


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    samples_per_class: int = 500
    noise_sigma: float = 0.5
    image_size: int = 32
    channels: int = 1
    smoothness: float = 2.0
    contrast: float = 0.35
    max_shift: int = 0
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("synthetic task needs at least 2 classes")
        if self.noise_sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.noise_sigma}")


def make_prototypes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Seeded smooth random patterns centred on mid-gray, one per class."""
    k, c, s = spec.num_classes, spec.channels, spec.image_size
    raw = rng.normal(size=(k, c, s, s))
    smooth = gaussian_filter(raw, sigma=(0, 0, spec.smoothness, spec.smoothness), mode="wrap")
    smooth /= smooth.std(axis=(1, 2, 3), keepdims=True)
    return np.clip(0.5 + spec.contrast * smooth, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset, np.ndarray]:
    """Return ``(train, val, prototypes)``.

    Each sample is its class prototype, circularly shifted by up to
    ``max_shift`` pixels per axis, plus Gaussian noise, clamped to [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    protos = make_prototypes(spec, rng)
    k, n = spec.num_classes, spec.samples_per_class
    labels = np.repeat(np.arange(k), n)
    images = protos[labels].copy()
    if spec.max_shift:
        shifts = rng.integers(-spec.max_shift, spec.max_shift + 1, size=(len(labels), 2))
        for i, (dy, dx) in enumerate(shifts):
            images[i] = np.roll(images[i], (int(dy), int(dx)), axis=(1, 2))
    if spec.noise_sigma > 0:
        images += rng.normal(0.0, spec.noise_sigma, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    order = rng.permutation(len(labels))
    n_val = int(round(spec.val_fraction * len(labels)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    full = Dataset(images, labels, k)
    return full.subset(train_idx), full.subset(val_idx), protos


def nearest_prototype_accuracy(dataset: Dataset, prototypes: np.ndarray) -> float:
    flat = dataset.images.reshape(len(dataset), -1)
    protos = prototypes.reshape(len(prototypes), -1)
    d2 = (flat**2).sum(1)[:, None] - 2 * flat @ protos.T + (protos**2).sum(1)[None, :]
    return float((d2.argmin(axis=1) == dataset.labels).mean())


# ---------------------------------------------------------------- eval-time geometry


def resize_bilinear(images: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (..., H, W) arrays with half-pixel centres."""
    h, w = images.shape[-2:]
    if (h, w) == (out_h, out_w):
        return images

    def coords(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    top = images[..., y0, :] * (1 - fy)[:, None] + images[..., y1, :] * fy[:, None]
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


def eval_resize_size(resolution: int, crop_ratio: float) -> int:
    return int(round(resolution / crop_ratio))


def resize_center_crop(images: np.ndarray, resolution: int, crop_ratio: float) -> np.ndarray:
    """Resize so the short side is ``round(resolution / crop_ratio)``, then centre-crop."""
    h, w = images.shape[-2:]
    short = eval_resize_size(resolution, crop_ratio)
    if h <= w:
        nh, nw = short, int(round(w * short / h))
    else:
        nh, nw = int(round(h * short / w)), short
    out = resize_bilinear(images, nh, nw)
    top = (nh - resolution) // 2
    left = (nw - resolution) // 2
    return out[..., top : top + resolution, left : left + resolution]
