import json
import math

import pytest

from usi import bench
from usi.checkpoint import load_checkpoint
from usi.cli import main
from usi.config import KNOWN_KEYS, load_config, parse_config
from usi.engine import ConfigError, DistillConfig

TINY = """
train_resolution = 8
test_resolution = 8
test_crop_ratio = 1.0
epochs = 2
batch_size = 6
num_classes = 3
samples_per_class = 10
image_size = 8
noise_sigma = 0.3
output_dir = "out"
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def test_empty_config_resolves_to_defaults():
    cfg = parse_config({}, env={})
    assert cfg.recipe == DistillConfig()
    assert set(cfg.resolved()) == set(KNOWN_KEYS)


def test_unknown_and_nested_keys_rejected():
    with pytest.raises(ConfigError, match="lerning_rate"):
        parse_config({"lerning_rate": 1.0}, env={})
    with pytest.raises(ConfigError, match="flat"):
        parse_config({"model": {"x": 1}}, env={})


def test_shorthand_values():
    cfg = parse_config({"randaugment": "9/0.25", "alpha_kd": "inf"}, env={})
    assert cfg.recipe.randaugment == (9.0, 0.25) and math.isinf(cfg.recipe.alpha_kd)


def test_seed_env_override():
    assert parse_config({"seed": 3}, env={"USI_SEED": "17"}).seed == 17
    assert parse_config({"seed": 3}, env={}).seed == 3
    with pytest.raises(ConfigError):
        parse_config({}, env={"USI_SEED": "x"})


def test_echoed_toml_reparses_identically(tmp_path):
    cfg = parse_config({"alpha_kd": "inf", "epochs": 7, "model": "cnn"}, env={})
    path = tmp_path / "echo.toml"
    path.write_text(cfg.to_toml())
    assert load_config(path, env={}).resolved() == cfg.resolved()


def test_dry_run_echoes_defaults(tmp_path, capsys):
    empty = tmp_path / "e.toml"
    empty.write_text("")
    assert main(["distill", str(empty), "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "epochs = 300" in out and "alpha_kd = 5.0" in out and "batch_size = 513" in out


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("colour = 1\n")
    assert main(["distill", str(bad), "--dry-run"]) == 1
    assert "colour" in capsys.readouterr().err
    assert main(["distill", str(tmp_path / "missing.toml")]) == 1
    assert main(["no-such-command"]) == 1
    broken = tmp_path / "broken.toml"
    broken.write_text("epochs = [\n")
    assert main(["distill", str(broken), "--dry-run"]) == 1


def test_end_to_end_pipeline(tiny, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["train-teacher", str(tiny)]) == 0
    assert (out / "teacher-cnn-seed0.usik").exists()
    assert main(["distill", str(tiny)]) == 0
    student = out / "mlp-student-seed0.usik"
    record = json.loads((out / "mlp-student-seed0.json").read_text())
    assert record["teacher"].startswith("cnn-teacher") and "wall_clock" not in record
    capsys.readouterr()

    assert main(["eval", str(student), str(tiny)]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["top1_acc"] == record["best_val_acc"]

    proto = tmp_path / "proto.toml"
    proto.write_text("batch_size = 4\nwarmup_iters = 1\ntimed_iters = 2\n")
    assert main(["bench", str(student), str(out / "teacher-cnn-seed0.usik"), "--protocol", str(proto), "--config", str(tiny)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "model,top1_acc,throughput,max_batch,params" and len(lines) == 3

    svg = tmp_path / "front.svg"
    assert main(["report", str(out / "bench.jsonl"), "--format", "svg", "--output", str(svg)]) == 0
    assert svg.read_text().startswith("<svg")
    assert len(bench.parse_jsonl((out / "bench.jsonl").read_bytes())) == 2


def test_distill_is_byte_reproducible(tiny, tmp_path):
    assert main(["distill", str(tiny)]) == 0
    out = tmp_path / "out"
    first = (out / "mlp-student-seed0.usik").read_bytes(), (out / "mlp-student-seed0.json").read_bytes()
    assert main(["distill", str(tiny)]) == 0
    second = (out / "mlp-student-seed0.usik").read_bytes(), (out / "mlp-student-seed0.json").read_bytes()
    assert first == second
    assert load_checkpoint(out / "mlp-student-seed0.usik").config_hash == load_config(tiny).recipe.config_hash


def test_ablate_writes_table(tiny, tmp_path, capsys):
    assert main(["ablate", str(tiny), "--axis", "alpha_kd", "--values", "0", "inf"]) == 0
    table = (tmp_path / "out" / "ablation-alpha_kd.txt").read_text()
    assert "KD relative weight" in table and "inf" in table
    rows = [json.loads(l) for l in (tmp_path / "out" / "ablation-alpha_kd.jsonl").read_text().splitlines()]
    assert [r["value"] for r in rows] == [0.0, "inf"]


def test_ablate_unknown_axis(tiny):
    assert main(["ablate", str(tiny), "--axis", "momentum"]) == 1


def test_weak_teacher_refused(tiny, tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    name = "mlp-student-1x8x8-k3"
    (out / "records.jsonl").write_text(json.dumps({"model": name, "teacher": None, "best_val_acc": 1.0}) + "\n")
    assert main(["distill", str(tiny)]) == 1
    tiny.write_text(TINY + "allow_weak_teacher = true\n")
    assert main(["distill", str(tiny)]) == 0
