"""Speed/accuracy benchmarking: throughput, analytic max batch, Pareto fronts, reports."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backbones import Backbone, ConfigurationError, activation_elements, fuse_batchnorm

BYTES_PER_ELEMENT = 8
CSV_COLUMNS = ("model", "top1_acc", "throughput", "max_batch", "params")
REPORT_FORMATS = ("csv", "jsonl", "svg")


class MeasurementError(RuntimeError):
    pass


class ReportFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Protocol:
    batch_size: int = 16
    warmup_iters: int = 3
    timed_iters: int = 10
    fuse: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.timed_iters < 1:
            raise ConfigurationError("batch_size and timed_iters must be >= 1")
        if self.warmup_iters < 1:
            raise ConfigurationError("warmup_iters must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "Protocol":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigurationError(f"unknown protocol keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class BenchmarkRecord:
    model: str
    top1_acc: float  # percent
    throughput: float  # images / sec
    max_batch: int
    params: int
    train_throughput: float | None = None
    protocol: dict | None = None
    config_hash: str | None = None
    seed: int | None = None

    def __post_init__(self):
        if not self.throughput > 0:
            raise ValueError(f"throughput must be > 0, got {self.throughput}")
        if not 0.0 <= self.top1_acc <= 100.0:
            raise ValueError(f"top1_acc must be a percentage, got {self.top1_acc}")


@dataclass
class ParetoReport:
    records: list[BenchmarkRecord]
    front: list[int]
    dominated: list[int] = field(default_factory=list)

    def front_records(self) -> list[BenchmarkRecord]:
        return [self.records[i] for i in self.front]


# ---------------------------------------------------------------- throughput


def _forward_fn(model) -> Callable[[np.ndarray], object]:
    if isinstance(model, Backbone):
        return model.predict
    if callable(model):
        return model
    return model.predict


def measure_throughput(
    model,
    batch_size: int = 16,
    warmup_iters: int = 3,
    timed_iters: int = 10,
    fuse: bool = True,
    seed: int = 0,
    image_shape=None,
    clock: Callable[[], float] = time.perf_counter,
) -> float:
    """Images per second over ``timed_iters`` forwards on one fixed random batch.

    ``model`` is a Backbone (fused first unless ``fuse`` is False) or any
    callable taking a (B, C, H, W) array.
    """
    Protocol(batch_size, warmup_iters, timed_iters, fuse, seed)
    if isinstance(model, Backbone):
        model.eval()
        if fuse:
            model = fuse_batchnorm(model)
        image_shape = model.image_shape
    if image_shape is None:
        raise ConfigurationError("image_shape is required for a bare callable")
    fwd = _forward_fn(model)
    x = np.random.default_rng(seed).random((batch_size,) + tuple(image_shape))
    for _ in range(warmup_iters):
        fwd(x)
    start = clock()
    for _ in range(timed_iters):
        fwd(x)
    elapsed = clock() - start
    if not elapsed > 0:
        raise MeasurementError(f"elapsed time {elapsed} s is not positive; raise timed_iters")
    return batch_size * timed_iters / elapsed


# ---------------------------------------------------------------- max batch


def params_bytes(model: Backbone) -> int:
    return model.param_count * BYTES_PER_ELEMENT


def per_sample_bytes(model: Backbone) -> int:
    return activation_elements(model) * BYTES_PER_ELEMENT


def max_batch_for(fixed_bytes: int, sample_bytes: int, budget: int) -> int:
    """Largest b with ``fixed + b * sample <= budget``, found by binary search."""
    if sample_bytes <= 0:
        raise ConfigurationError("per-sample footprint must be positive")
    if fixed_bytes + sample_bytes > budget:
        raise ConfigurationError(
            f"budget {budget} B cannot hold batch 1 ({fixed_bytes} B params + {sample_bytes} B activations)"
        )
    lo, hi = 1, 2
    while fixed_bytes + hi * sample_bytes <= budget:
        lo, hi = hi, hi * 2
    # invariant: lo fits, hi does not
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fixed_bytes + mid * sample_bytes <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def recommended_batch(max_batch: int) -> int:
    return max(1, math.floor(0.9 * max_batch))


def probe_max_batch(model: Backbone, memory_budget_bytes: int) -> tuple[int, int]:
    """``(max_batch, recommended)`` under an analytic f64 footprint of
    parameters plus every activation a training forward keeps."""
    best = max_batch_for(params_bytes(model), per_sample_bytes(model), memory_budget_bytes)
    return best, recommended_batch(best)


# ---------------------------------------------------------------- Pareto


def dominates(a: BenchmarkRecord, b: BenchmarkRecord) -> bool:
    return (
        a.top1_acc >= b.top1_acc
        and a.throughput >= b.throughput
        and (a.top1_acc > b.top1_acc or a.throughput > b.throughput)
    )


def pareto_front(records: Sequence[BenchmarkRecord]) -> ParetoReport:
    """Front by a sort-and-sweep; records equal on both axes share a front slot."""
    records = list(records)
    if not records:
        raise ValueError("pareto_front needs at least one record")
    order = sorted(range(len(records)), key=lambda i: (-records[i].top1_acc, -records[i].throughput))
    on_front = [False] * len(records)
    best_above = -math.inf  # max throughput among strictly higher accuracy
    k = 0
    while k < len(order):
        acc = records[order[k]].top1_acc
        group = []
        while k < len(order) and records[order[k]].top1_acc == acc:
            group.append(order[k])
            k += 1
        group_max = records[group[0]].throughput
        for i in group:
            thr = records[i].throughput
            on_front[i] = thr == group_max and thr > best_above
        best_above = max(best_above, group_max)
    front = [i for i in range(len(records)) if on_front[i]]
    dominated = [i for i in range(len(records)) if not on_front[i]]
    return ParetoReport(records, front, dominated)


# ---------------------------------------------------------------- reports


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_csv(records: Sequence[BenchmarkRecord]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([r.model, _fmt(r.top1_acc), _fmt(r.throughput), r.max_batch, r.params])
    return buf.getvalue().encode()


def parse_csv(data: bytes) -> list[BenchmarkRecord]:
    reader = csv.reader(io.StringIO(data.decode()))
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise ReportFormatError(f"unexpected CSV header {header}")
    return [
        BenchmarkRecord(m, float(a), float(t), int(b), int(p)) for m, a, t, b, p in reader
    ]


def emit_jsonl(records: Sequence[BenchmarkRecord], report: ParetoReport | None = None) -> bytes:
    front = set(report.front) if report else set()
    lines = []
    for i, r in enumerate(records):
        d = asdict(r)
        d["on_front"] = i in front
        lines.append(json.dumps(d, sort_keys=True))
    return ("\n".join(lines) + "\n").encode()


def parse_jsonl(data: bytes) -> list[BenchmarkRecord]:
    out = []
    for line in data.decode().splitlines():
        if line.strip():
            d = json.loads(line)
            d.pop("on_front", None)
            out.append(BenchmarkRecord(**d))
    return out


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def emit_svg(report: ParetoReport, width: int = 640, height: int = 420) -> bytes:
    """Throughput (x, log scale) against accuracy (y); front members filled and joined."""
    recs = report.records
    margin = 60
    xs = [math.log10(r.throughput) for r in recs]
    ys = [r.top1_acc for r in recs]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0

    def px(v):
        return margin + (v - x0) / (x1 - x0) * (width - 2 * margin)

    def py(v):
        return height - margin - (v - y0) / (y1 - y0) * (height - 2 * margin)

    front = set(report.front)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 15}" text-anchor="middle" font-size="12">'
        "throughput [img/s, log10]</text>",
        f'<text x="15" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 15 {height / 2:.1f})">top-1 accuracy [%]</text>',
        f'<text x="{margin}" y="{height - margin + 15}" font-size="10">{10 ** x0:.4g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 15}" font-size="10" text-anchor="end">{10 ** x1:.4g}</text>',
        f'<text x="{margin - 5}" y="{height - margin}" font-size="10" text-anchor="end">{y0:.4g}</text>',
        f'<text x="{margin - 5}" y="{margin + 4}" font-size="10" text-anchor="end">{y1:.4g}</text>',
    ]
    ordered = sorted(report.front, key=lambda i: xs[i])
    if len(ordered) > 1:
        pts = " ".join(f"{px(xs[i]):.2f},{py(ys[i]):.2f}" for i in ordered)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="steelblue" stroke-dasharray="4 2"/>')
    for i, r in enumerate(recs):
        fill = "steelblue" if i in front else "white"
        parts.append(
            f'<circle cx="{px(xs[i]):.2f}" cy="{py(ys[i]):.2f}" r="4" fill="{fill}" stroke="steelblue">'
            f"<title>{_esc(r.model)}</title></circle>"
        )
        parts.append(
            f'<text x="{px(xs[i]) + 6:.2f}" y="{py(ys[i]) - 6:.2f}" font-size="9">{_esc(r.model)}</text>'
        )
    parts.append("</svg>")
    return ("\n".join(parts) + "\n").encode()


def emit_report(records: Sequence[BenchmarkRecord], report: ParetoReport | None, fmt: str) -> bytes:
    if fmt not in REPORT_FORMATS and fmt != "svg-scatter":
        raise ReportFormatError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")
    report = report if report is not None else pareto_front(records)
    if fmt == "csv":
        return emit_csv(records)
    if fmt == "jsonl":
        return emit_jsonl(records, report)
    return emit_svg(report)
