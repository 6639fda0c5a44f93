import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from usi import bench
from usi.backbones import ConfigurationError, build
from usi.bench import BenchmarkRecord


def rec(name, acc, thr):
    return BenchmarkRecord(name, acc, thr, 1, 1)


def brute_force_front(records):
    return [i for i, r in enumerate(records) if not any(bench.dominates(o, r) for j, o in enumerate(records) if j != i)]


def test_single_record_is_on_front():
    assert bench.pareto_front([rec("a", 50, 10)]).front == [0]


def test_strict_dominance():
    report = bench.pareto_front([rec("a", 80, 100), rec("b", 81, 200)])
    assert report.front == [1] and report.dominated == [0]


def test_exact_ties_share_the_front():
    report = bench.pareto_front([rec("a", 80, 100), rec("b", 80, 100), rec("c", 70, 50)])
    assert report.front == [0, 1]


def test_equal_accuracy_lower_throughput_is_dominated():
    assert bench.pareto_front([rec("a", 80, 100), rec("b", 80, 90)]).front == [0]


def test_front_idempotent_and_dominated_additions():
    rng = np.random.default_rng(0)
    records = [rec(str(i), float(rng.uniform(0, 100)), float(rng.uniform(1, 1e3))) for i in range(50)]
    report = bench.pareto_front(records)
    again = bench.pareto_front(report.front_records())
    assert len(again.front) == len(report.front)
    worst = rec("w", 0.0, 0.5)
    assert bench.pareto_front(records + [worst]).front == report.front
    best = rec("b", 100.0, 1e4)
    assert bench.pareto_front(records + [best]).front == [len(records)]


def test_empty_records_rejected():
    with pytest.raises(ValueError):
        bench.pareto_front([])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(1, 20)), min_size=1, max_size=60))
def test_front_matches_brute_force(points):
    # small integer grids force plenty of ties
    records = [rec(str(i), float(a), float(t)) for i, (a, t) in enumerate(points)]
    report = bench.pareto_front(records)
    assert report.front == brute_force_front(records)
    assert sorted(report.front + report.dominated) == list(range(len(records)))


def test_record_invariants():
    with pytest.raises(ValueError):
        BenchmarkRecord("m", 50.0, 0.0, 1, 1)
    with pytest.raises(ValueError):
        BenchmarkRecord("m", 101.0, 1.0, 1, 1)


def test_throughput_of_sleeping_stub():
    def stub(x):
        time.sleep(0.010)

    thr = bench.measure_throughput(stub, batch_size=32, warmup_iters=1, timed_iters=20, image_shape=(1, 4, 4))
    assert 3200 * 0.8 <= thr <= 3200 * 1.2


def test_throughput_positive_for_real_model():
    thr = bench.measure_throughput(build("cnn", "student", 10, (1, 16, 16)), batch_size=4, warmup_iters=1, timed_iters=3)
    assert np.isfinite(thr) and thr > 0


def test_zero_elapsed_is_an_error():
    with pytest.raises(bench.MeasurementError):
        bench.measure_throughput(lambda x: None, 1, 1, 1, image_shape=(1, 2, 2), clock=lambda: 0.0)


def test_protocol_validation():
    with pytest.raises(ConfigurationError):
        bench.Protocol(warmup_iters=0)
    with pytest.raises(ConfigurationError):
        bench.Protocol.from_dict({"batchsize": 3})


def test_max_batch_closed_form():
    model = build("mlp", "student", 10, (1, 8, 8))
    fixed = bench.params_bytes(model)
    per = bench.per_sample_bytes(model)
    for budget in [fixed + per, fixed + 10 * per - 1, 10**6, 10**8 + 7]:
        best, rec_b = bench.probe_max_batch(model, budget)
        assert best == (budget - fixed) // per
        assert rec_b == max(1, int(0.9 * best))


def test_max_batch_monotone_and_too_small():
    model = build("cnn", "student", 10, (1, 16, 16))
    budgets = np.linspace(2e6, 5e7, 25).astype(int)
    values = [bench.probe_max_batch(model, int(b))[0] for b in budgets]
    assert values == sorted(values)
    with pytest.raises(ConfigurationError):
        bench.probe_max_batch(model, 1000)


def test_recommended_batch():
    assert bench.recommended_batch(100) == 90
    assert bench.recommended_batch(1) == 1


def test_csv_header_and_round_trip():
    records = [BenchmarkRecord("a,b", 81.25, 1234.5, 64, 1000), BenchmarkRecord("c", 1 / 3, 0.1, 1, 7)]
    data = bench.emit_report(records, None, "csv")
    assert data.decode().splitlines()[0] == "model,top1_acc,throughput,max_batch,params"
    back = bench.parse_csv(data)
    assert [(r.model, r.top1_acc, r.throughput, r.max_batch, r.params) for r in back] == [
        (r.model, r.top1_acc, r.throughput, r.max_batch, r.params) for r in records
    ]


def test_jsonl_round_trip():
    records = [BenchmarkRecord("a", 50.0, 10.0, 4, 9, protocol={"batch_size": 1}, config_hash="ab", seed=3)]
    assert bench.parse_jsonl(bench.emit_report(records, None, "jsonl")) == records


def test_svg_is_deterministic_and_marks_front():
    records = [rec("a", 80, 100), rec("b", 81, 200), rec("c<&>", 70, 400)]
    a = bench.emit_report(records, bench.pareto_front(records), "svg")
    b = bench.emit_report(records, bench.pareto_front(records), "svg")
    assert a == b
    text = a.decode()
    assert text.startswith("<svg") and text.count("<circle") == 3
    assert text.count('fill="steelblue" stroke') == 2
    assert "c&lt;&amp;&gt;" in text


def test_unknown_format():
    with pytest.raises(bench.ReportFormatError):
        bench.emit_report([rec("a", 1, 1)], None, "xlsx")
