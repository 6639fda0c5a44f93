"""Command line entry point: ``usi <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

from . import bench
from .augment import AugmentConfigError
from .backbones import ConfigurationError, TeacherNotStrongerError, build, check_teacher, freeze_as_teacher
from .checkpoint import CheckpointFormatError, load_checkpoint, restore_model, save_checkpoint
from .config import ExperimentConfig, load_config, read_toml
from .data import Dataset, DatasetFormatError, load_csv, load_idx
from .engine import (
    ABLATION_AXES,
    DEFAULT_AXIS_VALUES,
    ConfigError,
    RunRecord,
    TrainingDivergedError,
    ablation_sweep,
    distill,
    evaluate,
    format_ablation_table,
    train_supervised,
)

log = logging.getLogger("usi")

VALIDATION_ERRORS = (
    ConfigError,
    ConfigurationError,
    AugmentConfigError,
    DatasetFormatError,
    CheckpointFormatError,
    TeacherNotStrongerError,
    FileNotFoundError,
    KeyError,
    ValueError,
)
RECORDS_FILE = "records.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _append_jsonl(path: Path, line: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(line + "\n")


def _teacher_path(cfg: ExperimentConfig) -> Path:
    return cfg.out / f"teacher-{cfg.teacher}-seed{cfg.seed}.usik"


def _student_stem(cfg: ExperimentConfig) -> str:
    return f"{cfg.model}-{cfg.model_size}-seed{cfg.seed}"


def _echo(cfg: ExperimentConfig) -> None:
    print(f"# resolved config (hash {cfg.recipe.config_hash}, seed {cfg.seed})")
    print(cfg.to_toml(), end="")


def _train_teacher(cfg: ExperimentConfig, train: Dataset, val: Dataset) -> tuple[RunRecord, Path]:
    model = build(cfg.teacher, "teacher", train.num_classes, cfg.image_shape, seed=cfg.seed)
    record, model = train_supervised(model, train, val, cfg.recipe)
    path = _teacher_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, path, cfg.recipe.config_hash, cfg.seed)
    path.with_suffix(".json").write_text(record.to_json() + "\n")
    _append_jsonl(cfg.out / RECORDS_FILE, record.to_json())
    return record, path


def _load_teacher(cfg: ExperimentConfig, train: Dataset, val: Dataset):
    path = Path(cfg.teacher_checkpoint) if cfg.teacher_checkpoint else _teacher_path(cfg)
    if cfg.teacher_checkpoint and not path.is_absolute():
        path = Path(cfg.base_dir) / path
    if not path.exists():
        if cfg.teacher_checkpoint:
            raise FileNotFoundError(f"teacher checkpoint {path} not found")
        log.info("no teacher checkpoint at %s; training one first", path)
        _train_teacher(cfg, train, val)
    model = restore_model(load_checkpoint(path))
    acc = evaluate(model, val, cfg.recipe.test_resolution, cfg.recipe.test_crop_ratio)
    return freeze_as_teacher(model, acc)


def _student_baseline(cfg: ExperimentConfig, name: str) -> float | None:
    """Best supervised accuracy recorded for this student in the output dir, if any."""
    path = cfg.out / RECORDS_FILE
    if not path.exists():
        return None
    best = None
    for line in path.read_text().splitlines():
        d = json.loads(line)
        if d.get("model") == name and d.get("teacher") is None:
            best = max(best or 0.0, d["best_val_acc"])
    return best


def _parse_value(axis: str, text: str):
    if axis in ("augment_mode", "teacher_family"):
        return text
    if text.lower() in ("inf", "infinity", "∞"):
        return math.inf
    if axis in ("batch_size", "epochs"):
        return int(text)
    return float(text)


# ---------------------------------------------------------------- subcommands


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    _echo(cfg)
    train, val = cfg.dataset.load(Path(cfg.base_dir))
    record, path = _train_teacher(cfg, train, val)
    print(f"teacher {record.model}: best val {record.best_val_acc:.4f} -> {path}")
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    _echo(cfg)
    if args.dry_run:
        return 0
    train, val = cfg.dataset.load(Path(cfg.base_dir))
    teacher = _load_teacher(cfg, train, val)
    student = build(cfg.model, cfg.model_size, train.num_classes, cfg.image_shape, seed=cfg.seed, drop_path=cfg.drop_path)
    check_teacher(teacher, _student_baseline(cfg, student.name), cfg.allow_weak_teacher)
    record, student = distill(student, teacher, train, val, cfg.recipe)
    stem = _student_stem(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(student, cfg.out / f"{stem}.usik", cfg.recipe.config_hash, cfg.seed)
    (cfg.out / f"{stem}.json").write_text(record.to_json() + "\n")
    _append_jsonl(cfg.out / RECORDS_FILE, record.to_json())
    print(f"student {record.model}: best val {record.best_val_acc:.4f} (epoch {record.best_epoch})")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    axis = args.axis
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown axis {axis!r}; expected one of {ABLATION_AXES}")
    values = [_parse_value(axis, v) for v in args.values] if args.values else DEFAULT_AXIS_VALUES[axis]
    _echo(cfg)
    train, val = cfg.dataset.load(Path(cfg.base_dir))
    k = train.num_classes
    teachers: dict = {}

    def teacher_for(family):
        fam = family or cfg.teacher
        if fam not in teachers:
            sub = dataclasses.replace(cfg, teacher=fam)
            teachers[fam] = _load_teacher(sub, train, val)
        return teachers[fam]

    def make_student(drop_path):
        return build(cfg.model, cfg.model_size, k, cfg.image_shape, seed=cfg.seed, drop_path=drop_path or cfg.drop_path)

    rows = ablation_sweep(cfg.recipe, axis, values, make_student, teacher_for, train, val)
    table = format_ablation_table(axis, rows)
    print(table, end="")
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / f"ablation-{axis}.txt").write_text(table)
    with (cfg.out / f"ablation-{axis}.jsonl").open("w") as fh:
        for r in rows:
            value = "inf" if isinstance(r.value, float) and math.isinf(r.value) else r.value
            fh.write(json.dumps({"axis": axis, "value": value, "accuracy": r.accuracy, "record": r.record.to_dict()}, sort_keys=True) + "\n")
    return 0


def _eval_dataset(spec: str, labels: str | None, image_shape) -> Dataset:
    path = Path(spec)
    if path.suffix == ".toml":
        _, val = load_config(path).dataset.load(path.parent)
        return val
    if path.suffix == ".csv":
        return load_csv(path, image_shape)
    if labels is None:
        raise ConfigError("IDX evaluation needs --labels")
    return load_idx(path, labels)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    data = _eval_dataset(args.dataset, args.labels, model.image_shape)
    if data.num_classes != model.num_classes:
        data = Dataset(data.images, data.labels, model.num_classes, data.mean, data.std)
    acc = evaluate(model, data, model.image_shape[-1], args.crop_ratio)
    print(json.dumps({"model": ckpt.model_name, "config_hash": ckpt.config_hash, "seed": ckpt.seed, "top1_acc": acc}))
    return 0


def cmd_bench(args) -> int:
    raw = read_toml(args.protocol)
    budget = int(raw.pop("memory_budget_bytes", 256 * 2**20))
    protocol = bench.Protocol.from_dict(raw)
    cfg = load_config(args.config)
    _, val = cfg.dataset.load(Path(cfg.base_dir))
    records = []
    for path in args.checkpoints:
        ckpt = load_checkpoint(path)
        model = restore_model(ckpt)
        acc = evaluate(model, val, model.image_shape[-1], cfg.recipe.test_crop_ratio)
        thr = bench.measure_throughput(
            model, protocol.batch_size, protocol.warmup_iters, protocol.timed_iters, protocol.fuse, protocol.seed
        )
        max_b, _ = bench.probe_max_batch(model, budget)
        records.append(
            bench.BenchmarkRecord(
                ckpt.model_name, 100.0 * acc, thr, max_b, model.param_count,
                protocol=dict(protocol.__dict__, memory_budget_bytes=budget),
                config_hash=ckpt.config_hash, seed=ckpt.seed,
            )
        )
    report = bench.pareto_front(records)
    out = cfg.out / "bench.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(bench.emit_jsonl(records, report))
    sys.stdout.write(bench.emit_csv(records).decode())
    return 0


def cmd_report(args) -> int:
    records = bench.parse_jsonl(Path(args.records).read_bytes())
    if not records:
        raise ConfigError(f"{args.records} holds no records")
    data = bench.emit_report(records, bench.pareto_front(records), args.format)
    if args.output:
        Path(args.output).write_bytes(data)
    else:
        sys.stdout.write(data.decode())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="usi", description="Unified knowledge-distillation training at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train-teacher", help="supervised training of the configured teacher")
    s.add_argument("config")
    s.set_defaults(fn=cmd_train_teacher)

    s = sub.add_parser("distill", help="distill the configured student from its teacher")
    s.add_argument("config")
    s.add_argument("--dry-run", action="store_true", help="resolve and echo the config, then stop")
    s.set_defaults(fn=cmd_distill)

    s = sub.add_parser("ablate", help="one distillation run per value of an axis")
    s.add_argument("config")
    s.add_argument("--axis", required=True, choices=ABLATION_AXES)
    s.add_argument("--values", nargs="*")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("dataset", help="config .toml (its val split), .csv, or IDX images file")
    s.add_argument("--labels", help="IDX labels file")
    s.add_argument("--crop-ratio", type=float, default=1.0)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("bench", help="throughput, max batch and Pareto front of checkpoints")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--protocol", required=True)
    s.add_argument("--config", required=True, help="experiment config naming the validation set")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("report", help="render benchmark records")
    s.add_argument("records")
    s.add_argument("--format", required=True, choices=("csv", "svg", "jsonl"))
    s.add_argument("--output")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usi: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (TrainingDivergedError, bench.MeasurementError) as exc:
        print(f"usi: runtime failure: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"usi: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a runtime failure
        print(f"usi: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
