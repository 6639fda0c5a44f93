"""Distill every student family from one CNN teacher under the same config,
then benchmark all checkpoints and draw the speed/accuracy front.

    python scripts/families_pareto.py --out runs/families
"""
import argparse
from pathlib import Path

from usi import bench
from usi.backbones import FAMILIES, build, freeze_as_teacher
from usi.checkpoint import save_checkpoint
from usi.config import load_config
from usi.engine import distill, train_supervised

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(ROOT / "configs" / "desk.toml"))
    p.add_argument("--out", default=str(ROOT / "runs" / "families"))
    p.add_argument("--teacher-epochs", type=int, default=30)
    p.add_argument("--budget-mb", type=int, default=256)
    args = p.parse_args()

    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val = cfg.dataset.load(Path(cfg.base_dir))
    k, shape = train.num_classes, cfg.image_shape

    teacher = build(cfg.teacher, "teacher", k, shape, seed=100)
    rec, teacher = train_supervised(teacher, train, val, cfg.recipe.replace(epochs=args.teacher_epochs, seed=100))
    save_checkpoint(teacher, out / "teacher.usik", cfg.recipe.config_hash, 100)
    handle = freeze_as_teacher(teacher, rec.best_val_acc)
    print(f"teacher {teacher.name}: {100 * rec.best_val_acc:.1f}%", flush=True)

    records = []
    protocol = bench.Protocol(batch_size=64, warmup_iters=3, timed_iters=20)
    for family in FAMILIES:
        student = build(family, "student", k, shape, seed=cfg.seed)
        run, student = distill(student, handle, train, val, cfg.recipe)
        save_checkpoint(student, out / f"{family}.usik", run.config_hash, cfg.seed)
        thr = bench.measure_throughput(student, protocol.batch_size, protocol.warmup_iters, protocol.timed_iters)
        max_b, _ = bench.probe_max_batch(student, args.budget_mb * 2**20)
        records.append(
            bench.BenchmarkRecord(student.name, 100 * run.best_val_acc, thr, max_b, student.param_count,
                                  protocol=protocol.__dict__, config_hash=run.config_hash, seed=cfg.seed)
        )
        print(f"{family}: {100 * run.best_val_acc:.1f}%  {thr:.0f} img/s  hash {run.config_hash}", flush=True)

    report = bench.pareto_front(records)
    (out / "bench.jsonl").write_bytes(bench.emit_jsonl(records, report))
    (out / "front.svg").write_bytes(bench.emit_svg(report))
    print(bench.emit_csv(records).decode(), end="")
    print("front:", ", ".join(records[i].model for i in report.front))


if __name__ == "__main__":
    main()
