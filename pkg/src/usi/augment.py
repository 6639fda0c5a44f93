"""Mixup, cutmix, cutout, a rand-augment policy and the repeated-augmentation sampler.

Images are float arrays in [0, 1], batches are (B, C, H, W). Every function
takes an explicit ``numpy.random.Generator`` and is deterministic given it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

GRAY = 0.5
AUGMENT_MODES = ("none", "cutout", "mixup-cutmix")
OPS = (
    "identity",
    "horizontal_flip",
    "translate_x",
    "translate_y",
    "brightness",
    "contrast",
    "gaussian_noise",
    "cutout_box",
)
CUTOUT_FRACTION = 0.5


class AugmentConfigError(ValueError):
    pass


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.images[idx], self.labels[idx])


@dataclass
class MixOutcome:
    images: np.ndarray
    labels: np.ndarray
    lam: float
    mode: str
    box: tuple[int, int, int, int] | None = None

    @property
    def mixed_images(self) -> np.ndarray:
        return self.images

    @property
    def mixed_labels(self) -> np.ndarray:
        return self.labels


@dataclass(frozen=True)
class AugPolicy:
    magnitude: int = 7
    magnitude_std: float = 0.5
    num_ops: int = 2
    op_set: tuple[str, ...] = OPS
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.magnitude <= 10:
            raise AugmentConfigError(f"magnitude must be in [0, 10], got {self.magnitude}")
        if self.num_ops < 1:
            raise AugmentConfigError("num_ops must be >= 1")
        unknown = set(self.op_set) - set(OPS)
        if unknown:
            raise AugmentConfigError(f"unknown ops {sorted(unknown)}")


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise AugmentConfigError(f"mixing alpha must be > 0, got {alpha}")


def _check_pair(a: LabeledBatch, b: LabeledBatch) -> None:
    if a.images.shape != b.images.shape or a.labels.shape != b.labels.shape:
        raise AugmentConfigError("mixed batches must have equal shapes")


def mixup(a: LabeledBatch, b: LabeledBatch, alpha: float, rng: np.random.Generator, lam: float | None = None) -> MixOutcome:
    _check_alpha(alpha)
    _check_pair(a, b)
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    images = lam * a.images + (1.0 - lam) * b.images
    labels = lam * a.labels + (1.0 - lam) * b.labels
    return MixOutcome(images, labels, lam, "mixup")


def cutmix_box(h: int, w: int, lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Box of nominal area ``(1 - lam) * h * w`` centred at a uniform pixel, clipped."""
    ratio = math.sqrt(1.0 - lam)
    cut_h, cut_w = int(round(h * ratio)), int(round(w * ratio))
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    return clip_box(cy, cx, cut_h, cut_w, h, w)


def clip_box(cy: int, cx: int, box_h: int, box_w: int, h: int, w: int) -> tuple[int, int, int, int]:
    y0 = min(max(cy - box_h // 2, 0), h)
    x0 = min(max(cx - box_w // 2, 0), w)
    y1 = min(max(cy - box_h // 2 + box_h, 0), h)
    x1 = min(max(cx - box_w // 2 + box_w, 0), w)
    return y0, y1, x0, x1


def cutmix(
    a: LabeledBatch,
    b: LabeledBatch,
    alpha: float,
    rng: np.random.Generator,
    box: tuple[int, int, int, int] | None = None,
) -> MixOutcome:
    """Paste one box of ``b`` into ``a``; labels use the surviving-area fraction."""
    _check_alpha(alpha)
    _check_pair(a, b)
    h, w = a.images.shape[-2:]
    if box is None:
        lam = float(rng.beta(alpha, alpha))
        box = cutmix_box(h, w, lam, rng)
    y0, y1, x0, x1 = box
    images = a.images.copy()
    images[..., y0:y1, x0:x1] = b.images[..., y0:y1, x0:x1]
    lam_eff = 1.0 - (y1 - y0) * (x1 - x0) / (h * w)
    labels = lam_eff * a.labels + (1.0 - lam_eff) * b.labels
    return MixOutcome(images, labels, lam_eff, "cutmix", box)


def cutout(image: np.ndarray, box_size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[-2:]
    if box_size > min(h, w):
        raise AugmentConfigError(f"cutout box {box_size} larger than image {h}x{w}")
    y0, y1, x0, x1 = clip_box(int(rng.integers(h)), int(rng.integers(w)), box_size, box_size, h, w)
    out = image.copy()
    out[..., y0:y1, x0:x1] = GRAY
    return out


def cutout_batch(images: np.ndarray, box_size: int, rng: np.random.Generator) -> np.ndarray:
    return np.stack([cutout(img, box_size, rng) for img in images])


# ---------------------------------------------------------------- rand-augment


def _translate(imgs: np.ndarray, shifts: np.ndarray, axis: int) -> np.ndarray:
    """Shift each image by its own integer offset, filling with gray."""
    out = imgs.copy()
    n = imgs.shape[axis]
    for shift in np.unique(shifts):
        if shift == 0:
            continue
        sel = np.flatnonzero(shifts == shift)
        block = np.full_like(imgs[sel], GRAY)
        if abs(shift) < n:
            src = [slice(None)] * imgs.ndim
            dst = [slice(None)] * imgs.ndim
            if shift > 0:
                src[axis], dst[axis] = slice(0, n - shift), slice(shift, n)
            else:
                src[axis], dst[axis] = slice(-shift, n), slice(0, n + shift)
            block[tuple(dst)] = imgs[sel][tuple(src)]
        out[sel] = block
    return out


def _signs(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.where(rng.random(n) < 0.5, 1.0, -1.0)


def apply_op(imgs: np.ndarray, op: str, magnitudes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply one transform to a (B, C, H, W) batch, magnitude per image in [0, 10]."""
    level = np.asarray(magnitudes, dtype=np.float64) / 10.0
    n = len(imgs)
    h, w = imgs.shape[-2:]
    col = level.reshape(-1, 1, 1, 1)
    if op == "identity":
        return imgs
    if op == "horizontal_flip":
        return imgs[..., ::-1].copy()
    if op in ("translate_x", "translate_y"):
        size = w if op == "translate_x" else h
        shifts = (_signs(rng, n) * np.round(level * 0.3 * size)).astype(int)
        return _translate(imgs, shifts, 3 if op == "translate_x" else 2)
    if op == "brightness":
        return imgs * (1.0 + _signs(rng, n).reshape(-1, 1, 1, 1) * 0.9 * col)
    if op == "contrast":
        factor = 1.0 + _signs(rng, n).reshape(-1, 1, 1, 1) * 0.9 * col
        mean = imgs.mean(axis=(1, 2, 3), keepdims=True)
        return mean + (imgs - mean) * factor
    if op == "gaussian_noise":
        return imgs + rng.normal(size=imgs.shape) * (0.1 * col)
    if op == "cutout_box":
        sizes = np.round(level * CUTOUT_FRACTION * min(h, w)).astype(int)
        out = imgs.copy()
        for i, size in enumerate(sizes):
            if size > 0:
                out[i] = cutout(imgs[i], int(size), rng)
        return out
    raise AugmentConfigError(f"unknown op {op!r}")


def rand_augment_batch(images: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    """Per image: ``num_ops`` transforms drawn uniformly from the policy's op set,
    each at magnitude ~ N(m, std) clamped to [0, 10]."""
    out = images
    n = len(images)
    for _ in range(policy.num_ops):
        choice = rng.integers(len(policy.op_set), size=n)
        if policy.magnitude_std > 0:
            mags = np.clip(rng.normal(policy.magnitude, policy.magnitude_std, size=n), 0.0, 10.0)
        else:
            mags = np.full(n, float(policy.magnitude))
        nxt = out.copy() if out is images else out
        for k in np.unique(choice):
            sel = np.flatnonzero(choice == k)
            nxt[sel] = apply_op(out[sel], policy.op_set[k], mags[sel], rng)
        out = nxt
    return np.clip(out, 0.0, 1.0)


def rand_augment(image: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    return rand_augment_batch(image[None], policy, rng)[0]


# ---------------------------------------------------------------- dispatch and sampling


def mix_dispatch(
    batch: LabeledBatch,
    mode: str,
    rng: np.random.Generator,
    mixup_alpha: float = 0.8,
    cutmix_alpha: float = 1.0,
    switch_prob: float = 0.5,
) -> MixOutcome:
    """Batch-level mixing for one of the modes none / cutout / mixup-cutmix.

    In mixup-cutmix mode one coin flip per batch picks mixup or cutmix; each
    sample is paired with its partner under a random permutation.
    """
    if mode not in AUGMENT_MODES:
        raise AugmentConfigError(f"unknown augment mode {mode!r}; expected one of {AUGMENT_MODES}")
    if mode == "none":
        return MixOutcome(batch.images, batch.labels, 1.0, "none")
    if mode == "cutout":
        h, w = batch.images.shape[-2:]
        size = max(1, int(round(CUTOUT_FRACTION * min(h, w))))
        return MixOutcome(cutout_batch(batch.images, size, rng), batch.labels, 1.0, "cutout")
    if len(batch) < 2:
        return MixOutcome(batch.images, batch.labels, 1.0, "none")
    use_mixup = rng.random() < switch_prob
    partner = batch.take(rng.permutation(len(batch)))
    if use_mixup:
        return mixup(batch, partner, mixup_alpha, rng)
    return cutmix(batch, partner, cutmix_alpha, rng)


def repeated_aug_sampler(
    dataset_size: int, batch_size: int, repeats: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """One epoch of index batches; each holds ``batch_size / repeats`` distinct
    indices, each listed ``repeats`` times consecutively."""
    if repeats < 1 or batch_size % repeats:
        raise AugmentConfigError(f"batch_size {batch_size} not divisible by repeats {repeats}")
    distinct = batch_size // repeats
    order = rng.permutation(dataset_size)
    return [np.repeat(order[i : i + distinct], repeats) for i in range(0, dataset_size, distinct)]
