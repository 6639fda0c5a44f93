"""Seed-averaged ablation tables on the desk task.

    python scripts/ablations.py --axis alpha_kd --seeds 0 1 2
    python scripts/ablations.py --all

Each axis trains one student per (value, seed) against a single CNN teacher
and prints a table of mean top-1 accuracy with the per-seed spread.
"""
import argparse
import json
import math
import time
from pathlib import Path

import numpy as np

from usi.backbones import build, freeze_as_teacher
from usi.config import load_config
from usi.engine import ABLATION_AXES, DEFAULT_AXIS_VALUES, AXIS_LABELS, ablation_sweep, format_value, train_supervised

ROOT = Path(__file__).resolve().parents[1]


def train_teacher(cfg, family, train, val, epochs, seed):
    model = build(family, "teacher", train.num_classes, cfg.image_shape, seed=seed)
    rec, model = train_supervised(model, train, val, cfg.recipe.replace(epochs=epochs, seed=seed))
    print(f"teacher {family}: {100 * rec.best_val_acc:.1f}%", flush=True)
    return freeze_as_teacher(model, rec.best_val_acc)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(ROOT / "configs" / "desk.toml"))
    p.add_argument("--axis", choices=ABLATION_AXES, action="append")
    p.add_argument("--all", action="store_true")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--teacher-epochs", type=int, default=30)
    p.add_argument("--out", default=str(ROOT / "runs" / "ablations.jsonl"))
    args = p.parse_args()
    axes = ABLATION_AXES if args.all else (args.axis or ["alpha_kd"])

    cfg = load_config(args.config)
    train, val = cfg.dataset.load(Path(cfg.base_dir))
    teachers = {}

    def teacher_for(family):
        fam = family or cfg.teacher
        if fam not in teachers:
            teachers[fam] = train_teacher(cfg, fam, train, val, args.teacher_epochs, 100)
        return teachers[fam]

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for axis in axes:
        values = DEFAULT_AXIS_VALUES[axis]
        per_value = {format_value(v): [] for v in values}
        start = time.perf_counter()
        for seed in args.seeds:
            recipe = cfg.recipe.replace(seed=seed)
            model = "tiny_transformer" if axis == "drop_path" else cfg.model

            def make_student(dp, seed=seed, model=model):
                return build(model, cfg.model_size, train.num_classes, cfg.image_shape, seed=seed, drop_path=dp)

            for row in ablation_sweep(recipe, axis, values, make_student, teacher_for, train, val):
                per_value[format_value(row.value)].append(row.accuracy)
                with out.open("a") as fh:
                    value = "inf" if isinstance(row.value, float) and math.isinf(row.value) else row.value
                    fh.write(json.dumps({"axis": axis, "value": value, "seed": seed, "accuracy": row.accuracy}) + "\n")
        label = AXIS_LABELS[axis]
        width = max(len(label), *(len(v) for v in per_value))
        print(f"\n{label:<{width}} | Top1 Acc. [%] | seed spread")
        print(f"{'-' * width}-+---------------+------------")
        for v, accs in per_value.items():
            print(f"{v:<{width}} | {100 * np.mean(accs):13.1f} | {100 * (max(accs) - min(accs)):.1f}")
        print(f"({len(args.seeds)} seeds, {time.perf_counter() - start:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
