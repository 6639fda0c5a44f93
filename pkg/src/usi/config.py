"""Flat TOML experiment configs: training recipe keys plus dataset and model settings."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .backbones import FAMILIES, SIZES
from .data import Dataset, SyntheticSpec, generate_synthetic, load_csv, load_idx
from .engine import ConfigError, DistillConfig

SEED_ENV = "USI_SEED"
DATASET_SOURCES = ("synthetic", "idx-files", "csv")
NORMALIZATIONS = ("none", "per-channel")

_RECIPE_KEYS = tuple(f.name for f in dataclasses.fields(DistillConfig))


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"
    num_classes: int = 10
    samples_per_class: int = 500
    noise_sigma: float = 0.5
    image_size: int = 32
    channels: int = 1
    smoothness: float = 2.0
    contrast: float = 0.35
    max_shift: int = 0
    data_seed: int = 0
    val_fraction: float = 0.1
    train_images: str = ""
    train_labels: str = ""
    val_images: str = ""
    val_labels: str = ""
    train_csv: str = ""
    val_csv: str = ""
    normalization: str = "none"

    def __post_init__(self):
        if self.source not in DATASET_SOURCES:
            raise ConfigError(f"dataset must be one of {DATASET_SOURCES}, got {self.source!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_classes=self.num_classes,
            samples_per_class=self.samples_per_class,
            noise_sigma=self.noise_sigma,
            image_size=self.image_size,
            channels=self.channels,
            smoothness=self.smoothness,
            contrast=self.contrast,
            max_shift=self.max_shift,
            seed=self.data_seed,
            val_fraction=self.val_fraction,
        )

    def load(self, base_dir: Path = Path(".")) -> tuple[Dataset, Dataset]:
        if self.source == "synthetic":
            train, val, _ = generate_synthetic(self.synthetic_spec())
        elif self.source == "idx-files":
            train = load_idx(base_dir / self.train_images, base_dir / self.train_labels, self.num_classes)
            val = load_idx(base_dir / self.val_images, base_dir / self.val_labels, self.num_classes)
        else:
            shape = (self.channels, self.image_size, self.image_size)
            train = load_csv(base_dir / self.train_csv, shape, self.num_classes)
            val = load_csv(base_dir / self.val_csv, shape, self.num_classes)
        if self.normalization == "per-channel":
            mean = tuple(float(v) for v in train.images.mean(axis=(0, 2, 3)))
            std = tuple(float(v) if v > 0 else 1.0 for v in train.images.std(axis=(0, 2, 3)))
            train = dataclasses.replace(train, mean=mean, std=std)
            val = dataclasses.replace(val, mean=mean, std=std)
        return train, val


_DATASET_KEYS = {"dataset": "source"} | {
    f.name: f.name for f in dataclasses.fields(DatasetConfig) if f.name != "source"
}


@dataclass(frozen=True)
class ExperimentConfig:
    recipe: DistillConfig = field(default_factory=DistillConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: str = "mlp"
    model_size: str = "student"
    teacher: str = "cnn"
    teacher_checkpoint: str = ""
    allow_weak_teacher: bool = False
    drop_path: float = 0.0
    output_dir: str = "runs"
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        for key, value in (("model", self.model), ("teacher", self.teacher)):
            if value not in FAMILIES:
                raise ConfigError(f"{key} must be one of {FAMILIES}, got {value!r}")
        if self.model_size not in SIZES:
            raise ConfigError(f"model_size must be one of {SIZES}, got {self.model_size!r}")

    @property
    def seed(self) -> int:
        return self.recipe.seed

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.dataset.channels, self.recipe.train_resolution, self.recipe.train_resolution)

    @property
    def out(self) -> Path:
        p = Path(self.output_dir)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def resolved(self) -> dict:
        """Every key with its effective value, in file-key spelling."""
        out = {k: _plain(v) for k, v in self.recipe.to_dict().items()}
        for key, attr in _DATASET_KEYS.items():
            out[key] = getattr(self.dataset, attr)
        for key in _EXPERIMENT_KEYS:
            out[key] = getattr(self, key)
        return out

    def to_toml(self) -> str:
        lines = []
        for k, v in self.resolved().items():
            lines.append(f"{k} = {_toml_value(v)}")
        return "\n".join(lines) + "\n"

    @property
    def resolved_hash(self) -> str:
        canon = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


_EXPERIMENT_KEYS = ("model", "model_size", "teacher", "teacher_checkpoint", "allow_weak_teacher", "drop_path", "output_dir")
KNOWN_KEYS = _RECIPE_KEYS + tuple(_DATASET_KEYS) + _EXPERIMENT_KEYS


def _plain(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return "inf" if v == "inf" else json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce_recipe(key: str, value):
    if key == "randaugment":
        if isinstance(value, str):
            # accepts the "7/0.5" shorthand
            mag, _, std = value.partition("/")
            try:
                return (float(mag), float(std or 0.0))
            except ValueError as exc:
                raise ConfigError(f"randaugment: cannot parse {value!r}") from exc
        return tuple(value)
    if key == "alpha_kd" and isinstance(value, str):
        if value.lower() in ("inf", "infinity"):
            return math.inf
        raise ConfigError(f"alpha_kd: expected a number or 'inf', got {value!r}")
    return value


def parse_config(table: dict, base_dir=".", env: dict | None = None) -> ExperimentConfig:
    """Resolve a flat key table into an ExperimentConfig; ``USI_SEED`` wins over ``seed``."""
    env = os.environ if env is None else env
    unknown = [k for k in table if k not in KNOWN_KEYS]
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    nested = [k for k, v in table.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config is flat; tables not allowed: {', '.join(nested)}")
    recipe = {k: _coerce_recipe(k, table[k]) for k in _RECIPE_KEYS if k in table}
    if env.get(SEED_ENV):
        try:
            recipe["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    dataset = {attr: table[key] for key, attr in _DATASET_KEYS.items() if key in table}
    rest = {k: table[k] for k in _EXPERIMENT_KEYS if k in table}
    try:
        return ExperimentConfig(
            recipe=DistillConfig(**recipe), dataset=DatasetConfig(**dataset), base_dir=str(base_dir), **rest
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def read_toml(path) -> dict:
    path = Path(path)
    try:
        return tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    return parse_config(read_toml(path), Path(path).parent, env)
