"""The distillation training loop, supervised training, evaluation and ablation sweeps."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import augment
from .augment import AugPolicy, LabeledBatch, MixOutcome
from .backbones import Backbone, TeacherHandle, build
from .data import Dataset, resize_bilinear, resize_center_crop
from .losses import INF, KDWeights, usi_loss
from .optim import AdamWState, OneCycleSchedule, adamw_step, one_cycle_lr
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    """The full training recipe; defaults are the published configuration."""

    train_resolution: int = 224
    test_resolution: int = 224
    epochs: int = 300
    optimizer: str = "adamw"
    weight_decay: float = 2e-2
    learning_rate: float = 2e-3
    lr_decay: str = "one-cycle"
    warmup_fraction: float = 0.1
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    mixup_alpha: float = 0.8
    cutmix_alpha: float = 1.0
    augment_mode: str = "mixup-cutmix"
    randaugment: tuple[float, float] = (7, 0.5)
    randaugment_num_ops: int = 2
    test_crop_ratio: float = 0.95
    repeated_augs: int = 3
    base_loss: str = "cross-entropy"
    kd_loss: str = "kl-divergence"
    kd_temperature: float = 1.0
    alpha_kd: float = 5.0
    batch_size: int = 513
    seed: int = 0

    def __post_init__(self):
        if self.optimizer != "adamw":
            raise ConfigError(f"optimizer must be 'adamw', got {self.optimizer!r}")
        if self.lr_decay != "one-cycle":
            raise ConfigError(f"lr_decay must be 'one-cycle', got {self.lr_decay!r}")
        if self.augment_mode not in augment.AUGMENT_MODES:
            raise ConfigError(f"augment_mode must be one of {augment.AUGMENT_MODES}, got {self.augment_mode!r}")
        if self.base_loss != "cross-entropy" or self.kd_loss != "kl-divergence":
            raise ConfigError("base_loss must be 'cross-entropy' and kd_loss 'kl-divergence'")
        if self.repeated_augs < 1 or self.batch_size % self.repeated_augs:
            raise ConfigError(
                f"batch_size {self.batch_size} must be divisible by repeated_augs {self.repeated_augs}"
            )
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate > 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if not 0 < self.test_crop_ratio <= 1:
            raise ConfigError("test_crop_ratio must lie in (0, 1]")
        if not self.kd_temperature > 0:
            raise ConfigError("kd_temperature must be > 0")
        if math.isnan(self.alpha_kd) or self.alpha_kd < 0:
            raise ConfigError("alpha_kd must be >= 0 or inf")
        if len(self.randaugment) != 2:
            raise ConfigError("randaugment is (magnitude, magnitude_std)")

    @property
    def kd_weights(self) -> KDWeights:
        return KDWeights(self.alpha_kd, self.kd_temperature)

    @property
    def policy(self) -> AugPolicy:
        mag, std = self.randaugment
        return AugPolicy(int(mag), float(std), self.randaugment_num_ops, seed=self.seed)

    def replace(self, **changes) -> "DistillConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["randaugment"] = list(self.randaugment)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=str, allow_nan=True)

    @property
    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("seed")
        canon = json.dumps({k: _jsonable(v) for k, v in d.items()}, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return v


@dataclass
class EpochStats:
    epoch: int
    loss: float
    ce: float | None
    kl: float | None
    val_acc: float


@dataclass
class RunRecord:
    model: str
    teacher: str | None
    config_hash: str
    seed: int
    config: dict
    epochs: list[EpochStats] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = 0.0
    final_val_acc: float = 0.0
    selection: str = "best-val"
    wall_clock: float = 0.0
    images_per_sec: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        d = dataclasses.asdict(self)
        d["config"] = {k: _jsonable(v) for k, v in d["config"].items()}
        if not timing:
            d.pop("wall_clock")
            d.pop("images_per_sec")
        return d

    def to_json(self, timing: bool = False) -> str:
        """Deterministic JSON; timing fields are excluded unless requested."""
        return json.dumps(self.to_dict(timing), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["epochs"] = [EpochStats(**e) for e in d.get("epochs", [])]
        return cls(**d)


# ---------------------------------------------------------------- evaluation


def evaluate(
    model: Backbone,
    dataset: Dataset,
    resolution: int | None = None,
    crop_ratio: float = 1.0,
    batch_size: int = 500,
) -> float:
    """Top-1 accuracy after resize-short-side + centre-crop preprocessing."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    resolution = resolution or dataset.image_shape[-1]
    was_training = model.mode == "train"
    model.eval()
    correct = 0
    try:
        for i in range(0, len(dataset), batch_size):
            x = resize_center_crop(dataset.images[i : i + batch_size], resolution, crop_ratio)
            logits = model.predict(dataset.normalize(x))
            correct += int((logits.argmax(axis=1) == dataset.labels[i : i + batch_size]).sum())
    finally:
        if was_training:
            model.train()
    return correct / len(dataset)


# ---------------------------------------------------------------- batch preparation


def batch_rng(seed: int, epoch: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step, 0x5EED])


def prepare_batch(
    dataset: Dataset, idx: np.ndarray, config: DistillConfig, rng: np.random.Generator
) -> MixOutcome:
    """Per-image rand-augment, then batch-level mixing."""
    images = augment.rand_augment_batch(dataset.images[idx], config.policy, rng)
    labels = augment.one_hot(dataset.labels[idx], dataset.num_classes)
    return augment.mix_dispatch(
        LabeledBatch(images, labels), config.augment_mode, rng, config.mixup_alpha, config.cutmix_alpha
    )


def iter_batches(
    dataset: Dataset, config: DistillConfig, epoch: int, prefetch: bool = False
) -> Iterator[tuple[int, MixOutcome]]:
    """Batches for one epoch. With ``prefetch`` a worker thread prepares up to
    two batches ahead; every batch owns its RNG stream so order and content
    match the inline path exactly."""
    plan = augment.repeated_aug_sampler(
        len(dataset), config.batch_size, config.repeated_augs, np.random.default_rng([config.seed, epoch, 0x5A])
    )

    def make(step):
        return step, prepare_batch(dataset, plan[step], config, batch_rng(config.seed, epoch, step))

    if not prefetch:
        for step in range(len(plan)):
            yield make(step)
        return
    q: queue.Queue = queue.Queue(maxsize=2)
    stop = threading.Event()

    def worker():
        try:
            for step in range(len(plan)):
                if stop.is_set():
                    return
                q.put(make(step))
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        else:
            q.put(None)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is None:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(0.01)


def steps_per_epoch(n: int, config: DistillConfig) -> int:
    return math.ceil(n / (config.batch_size // config.repeated_augs))


def _at_resolution(dataset: Dataset, resolution: int) -> Dataset:
    if dataset.image_shape[-1] == resolution and dataset.image_shape[-2] == resolution:
        return dataset
    images = resize_bilinear(dataset.images, resolution, resolution)
    return Dataset(images, dataset.labels, dataset.num_classes, dataset.mean, dataset.std)


# ---------------------------------------------------------------- training


BatchProbe = Callable[[int, int, MixOutcome, "np.ndarray | None", Tensor], None]
EpochHook = Callable[[int, float, Backbone], None]


def _fit(
    student: Backbone,
    teacher: TeacherHandle | None,
    train_set: Dataset,
    val_set: Dataset,
    config: DistillConfig,
    weights: KDWeights,
    prefetch: bool = False,
    probe: BatchProbe | None = None,
    on_epoch: EpochHook | None = None,
) -> tuple[RunRecord, Backbone]:
    if teacher is not None and teacher.num_classes != student.num_classes:
        raise ConfigError(
            f"teacher has {teacher.num_classes} classes, student has {student.num_classes}"
        )
    if train_set.num_classes != student.num_classes:
        raise ConfigError(f"dataset has {train_set.num_classes} classes, model has {student.num_classes}")
    train_set = _at_resolution(train_set, config.train_resolution)
    per_epoch = steps_per_epoch(len(train_set), config)
    sched = OneCycleSchedule(
        config.learning_rate, per_epoch * config.epochs, config.warmup_fraction, config.div_factor, config.final_div_factor
    )
    opt = AdamWState(lr=config.learning_rate, weight_decay=config.weight_decay)
    params = student.parameters()
    record = RunRecord(
        model=student.name,
        teacher=teacher.backbone.name if teacher is not None else None,
        config_hash=config.config_hash,
        seed=config.seed,
        config=config.to_dict(),
    )
    best_state = None
    step = 0
    images_seen = 0
    start = time.perf_counter()
    student.train()
    for epoch in range(config.epochs):
        sums = {"loss": 0.0, "ce": 0.0, "kl": 0.0}
        for local, batch in iter_batches(train_set, config, epoch, prefetch):
            x = train_set.normalize(batch.images)
            teacher_logits = teacher.logits(x) if teacher is not None else None
            logits = student.forward(x)
            parts = usi_loss(logits, teacher_logits, batch.labels, weights)
            loss_val = parts.total.item()
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {local}; batch seed {[config.seed, epoch, local]}"
                )
            if probe is not None:
                probe(epoch, local, batch, teacher_logits, logits)
            student.zero_grad()
            backward(parts.total)
            lr_now = one_cycle_lr(step, sched)
            adamw_step(params, opt, lr_now)
            record.lr_trace.append(lr_now)
            sums["loss"] += loss_val
            sums["ce"] += parts.ce or 0.0
            sums["kl"] += parts.kl or 0.0
            step += 1
            images_seen += len(batch.images)
        acc = evaluate(student, val_set, config.test_resolution, config.test_crop_ratio)
        record.epochs.append(
            EpochStats(
                epoch=epoch,
                loss=sums["loss"] / per_epoch,
                ce=sums["ce"] / per_epoch if weights.alpha_kd != INF else None,
                kl=sums["kl"] / per_epoch if teacher is not None and weights.alpha_kd != 0 else None,
                val_acc=acc,
            )
        )
        log.info("%s epoch %d loss %.4f val %.4f", student.name, epoch, sums["loss"] / per_epoch, acc)
        if acc > record.best_val_acc or best_state is None:
            record.best_val_acc, record.best_epoch = acc, epoch
            best_state = {k: v.copy() for k, v in student.state_dict().items()}
        if on_epoch is not None:
            on_epoch(epoch, acc, student)
    record.final_val_acc = record.epochs[-1].val_acc
    student.load_state_dict(best_state)
    student.zero_grad()
    student.eval()
    record.wall_clock = time.perf_counter() - start
    record.images_per_sec = images_seen / record.wall_clock if record.wall_clock > 0 else 0.0
    return record, student


def distill(
    student: Backbone,
    teacher: TeacherHandle,
    train_set: Dataset,
    val_set: Dataset,
    config: DistillConfig,
    prefetch: bool = False,
    probe: BatchProbe | None = None,
) -> tuple[RunRecord, Backbone]:
    """Train ``student`` against the combined CE + KD objective.

    The teacher sees exactly the augmented, mixed pixels the student sees.
    """
    return _fit(student, teacher, train_set, val_set, config, config.kd_weights, prefetch, probe)


def train_supervised(
    model: Backbone,
    train_set: Dataset,
    val_set: Dataset,
    config: DistillConfig,
    prefetch: bool = False,
    on_epoch: EpochHook | None = None,
) -> tuple[RunRecord, Backbone]:
    """Plain CE training. ``on_epoch(epoch, val_acc, model)`` runs after every evaluation."""
    return _fit(model, None, train_set, val_set, config, KDWeights(0.0, config.kd_temperature), prefetch, on_epoch=on_epoch)


# ---------------------------------------------------------------- ablations

ABLATION_AXES = ("alpha_kd", "temperature", "batch_size", "epochs", "augment_mode", "teacher_family", "drop_path")
DEFAULT_AXIS_VALUES = {
    "alpha_kd": [0.0, 1.0, 5.0, 10.0, 20.0, INF],
    "temperature": [0.1, 1.0, 2.0, 5.0, 10.0],
    "batch_size": [24, 48, 96],
    "epochs": [10, 20, 40],
    "augment_mode": ["none", "cutout", "mixup-cutmix"],
    "teacher_family": ["cnn", "tiny_transformer"],
    "drop_path": [0.0, 0.1, 0.2],
}
AXIS_LABELS = {
    "alpha_kd": "KD relative weight",
    "temperature": "KD temperature",
    "batch_size": "Batch size",
    "epochs": "Epochs",
    "augment_mode": "Augmentation type",
    "teacher_family": "Teacher",
    "drop_path": "Drop-path",
}
_AXIS_FIELDS = {
    "alpha_kd": "alpha_kd",
    "temperature": "kd_temperature",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "augment_mode": "augment_mode",
}


@dataclass
class AblationRow:
    value: object
    accuracy: float
    record: RunRecord


def ablation_sweep(
    base: DistillConfig,
    axis: str,
    values,
    make_student: Callable[[float], Backbone],
    teachers: Callable[[object], TeacherHandle],
    train_set: Dataset,
    val_set: Dataset,
) -> list[AblationRow]:
    """One distillation run per axis value, every other field held fixed.

    ``make_student(drop_path)`` builds a fresh student; ``teachers(value)``
    returns the teacher for a run (only the teacher_family axis varies it).
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")
    rows = []
    for value in values:
        cfg = base.replace(**{_AXIS_FIELDS[axis]: value}) if axis in _AXIS_FIELDS else base
        student = make_student(float(value) if axis == "drop_path" else 0.0)
        teacher = teachers(value if axis == "teacher_family" else None)
        record, _ = distill(student, teacher, train_set, val_set, cfg)
        rows.append(AblationRow(value, record.best_val_acc, record))
    return rows


def format_value(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return f"{v:g}"
    return str(v)


def format_ablation_table(axis: str, rows: list[AblationRow]) -> str:
    label = AXIS_LABELS.get(axis, axis)
    width = max(len(label), *(len(format_value(r.value)) for r in rows))
    lines = [f"{label:<{width}} | Top1 Acc. [%]", f"{'-' * width}-+--------------"]
    for r in rows:
        lines.append(f"{format_value(r.value):<{width}} | {100 * r.accuracy:.1f}")
    return "\n".join(lines) + "\n"
