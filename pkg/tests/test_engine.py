import math

import numpy as np
import pytest

from usi.backbones import build, freeze_as_teacher
from usi.data import SyntheticSpec, generate_synthetic
from usi.engine import (
    ConfigError,
    DistillConfig,
    RunRecord,
    TrainingDivergedError,
    ablation_sweep,
    distill,
    evaluate,
    format_ablation_table,
    iter_batches,
    steps_per_epoch,
    train_supervised,
)
from usi.losses import INF
from usi.optim import OneCycleSchedule, lr_trace

SHAPE = (1, 8, 8)


@pytest.fixture(scope="module")
def data():
    train, val, _ = generate_synthetic(SyntheticSpec(num_classes=3, samples_per_class=14, image_size=8, noise_sigma=0.3))
    return train, val


@pytest.fixture(scope="module")
def teacher(data):
    model = build("cnn", "teacher", 3, SHAPE, seed=9)
    rec, model = train_supervised(model, *data, small())
    return freeze_as_teacher(model, rec.best_val_acc)


def small(**kw):
    base = dict(train_resolution=8, test_resolution=8, epochs=2, batch_size=6, test_crop_ratio=1.0)
    base.update(kw)
    return DistillConfig(**base)


def student(seed=0):
    return build("mlp", "student", 3, SHAPE, seed=seed)


def test_alpha_zero_matches_supervised_training(data, teacher):
    a, _ = distill(student(), teacher, *data, small(alpha_kd=0.0))
    b, _ = train_supervised(student(), *data, small(alpha_kd=0.0))
    assert [e.loss for e in a.epochs] == [e.loss for e in b.epochs]
    assert all(e.kl is None for e in a.epochs)


def test_inf_alpha_records_no_ce(data, teacher):
    rec, _ = distill(student(), teacher, *data, small(alpha_kd=INF))
    assert all(e.ce is None and e.kl is not None for e in rec.epochs)


def test_lr_trace_matches_schedule(data, teacher):
    cfg = small(epochs=3)
    rec, _ = distill(student(), teacher, *data, cfg)
    total = steps_per_epoch(len(data[0]), cfg) * cfg.epochs
    assert rec.lr_trace == lr_trace(OneCycleSchedule(cfg.learning_rate, total))


def test_runs_are_deterministic(data, teacher):
    a, ma = distill(student(), teacher, *data, small())
    b, mb = distill(student(), teacher, *data, small())
    assert a.to_json() == b.to_json()
    for k, v in ma.state_dict().items():
        np.testing.assert_array_equal(v, mb.state_dict()[k])


def test_prefetch_yields_identical_batches(data):
    cfg = small()
    inline = list(iter_batches(data[0], cfg, 1))
    threaded = list(iter_batches(data[0], cfg, 1, prefetch=True))
    assert len(inline) == len(threaded)
    for (s1, b1), (s2, b2) in zip(inline, threaded):
        assert s1 == s2
        np.testing.assert_array_equal(b1.images, b2.images)
        np.testing.assert_array_equal(b1.labels, b2.labels)


def test_prefetch_training_matches_inline(data, teacher):
    a, _ = distill(student(), teacher, *data, small())
    b, _ = distill(student(), teacher, *data, small(), prefetch=True)
    assert a.to_json() == b.to_json()


def test_teacher_sees_student_pixels(data, teacher):
    seen = []

    def probe(epoch, step, batch, t_logits, s_logits):
        seen.append(np.abs(t_logits - teacher.logits(data[0].normalize(batch.images))).max())

    distill(student(), teacher, *data, small(epochs=1), probe=probe)
    assert seen and max(seen) == 0.0


def test_divergence_is_reported(data, teacher):
    model = student()
    next(iter(model.parameters().values())).data[...] = np.nan
    with pytest.raises(TrainingDivergedError, match="epoch 0 step 0"):
        distill(model, teacher, *data, small())


def test_class_mismatch(data, teacher):
    with pytest.raises(ConfigError, match="classes"):
        distill(build("mlp", "student", 4, SHAPE), teacher, *data, small())


def test_record_excludes_timing_and_round_trips(data, teacher):
    rec, _ = distill(student(), teacher, *data, small())
    assert "wall_clock" not in rec.to_json() and "wall_clock" in rec.to_json(timing=True)
    assert RunRecord.from_dict(rec.to_dict(timing=True)) == rec
    assert rec.best_val_acc == max(e.val_acc for e in rec.epochs)


def test_best_checkpoint_is_restored(data, teacher):
    rec, model = distill(student(), teacher, *data, small(epochs=3))
    assert evaluate(model, data[1]) == rec.best_val_acc


def test_config_validation():
    with pytest.raises(ConfigError):
        small(batch_size=7)
    with pytest.raises(ConfigError):
        small(optimizer="sgd")
    with pytest.raises(ConfigError):
        small(alpha_kd=-1.0)
    assert small(seed=1).config_hash == small(seed=2).config_hash
    assert small().config_hash != small(alpha_kd=1.0).config_hash


def test_defaults_are_the_published_recipe():
    cfg = DistillConfig()
    assert (cfg.train_resolution, cfg.epochs, cfg.learning_rate, cfg.weight_decay) == (224, 300, 2e-3, 2e-2)
    assert (cfg.alpha_kd, cfg.kd_temperature, cfg.repeated_augs, cfg.test_crop_ratio) == (5.0, 1.0, 3, 0.95)
    assert cfg.randaugment == (7, 0.5) and cfg.augment_mode == "mixup-cutmix"


def test_ablation_sweep_and_table(data, teacher):
    rows = ablation_sweep(small(epochs=1), "alpha_kd", [0.0, INF], lambda dp: student(), lambda v: teacher, *data)
    assert [r.value for r in rows] == [0.0, INF]
    assert rows[1].record.config["alpha_kd"] == math.inf
    table = format_ablation_table("alpha_kd", rows)
    lines = table.splitlines()
    assert lines[0].startswith("KD relative weight") and lines[0].endswith("Top1 Acc. [%]")
    assert lines[3].startswith("inf")
    with pytest.raises(ConfigError):
        ablation_sweep(small(), "momentum", [0.9], None, None, *data)
