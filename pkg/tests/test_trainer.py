import csv
import io
import math

import numpy as np
import pytest

from fcsr.imaging import extract_patches
from fcsr.model import ModelConfig, SRModel
from fcsr.objectives import LossConfig
from fcsr.optim import RMSProp, SGDMomentum
from fcsr.trainer import (LOG_FIELDS, PROFILES, ConvergenceLog, LogRow, TrainingDivergedError, TrainSchedule,
                          ablate, ablation_arms, ablation_csv, config_diff, finetune, format_kv, parse_kv,
                          resolve_settings, train)

CFG = ModelConfig(scale=3, lr_patch=8, num_blocks=2, ident_dim=8, bottleneck_dim=4, final_dim=2, units_per_block=2)
QUICK = TrainSchedule.scratch(epochs=2, batch_size=8, lr_conv=0.001, lr_fc=0.02, max_iterations=6)


@pytest.fixture(scope="module")
def patches(camera):
    return extract_patches([camera[100:244, 100:244]], 3, 8, 8)


@pytest.fixture(scope="module")
def patches_x2(camera):
    return extract_patches([camera[100:196, 100:196]], 2, 8, 8)


def test_scratch_schedule_arithmetic():
    s = TrainSchedule.scratch()
    assert s.lr(0) == 0.1 and s.lr(9) == 0.1
    assert s.lr(10) == pytest.approx(0.01)
    assert s.lr(0, "recon") == 0.01 and s.lr(20, "recon") == pytest.approx(1e-4)
    assert s.clip_limit(9) == 1.0 and s.clip_limit(10) == pytest.approx(0.1)
    assert isinstance(s.make_optimizer(), SGDMomentum)


def test_finetune_schedule_arithmetic():
    s = TrainSchedule.finetune()
    assert s.lr(2) == pytest.approx(8.1e-4, rel=1e-12)
    assert s.lr(2, "recon") == pytest.approx(8.1e-4, rel=1e-12)
    opt = s.make_optimizer()
    assert isinstance(opt, RMSProp) and opt.decay == 0.9 and opt.eps == 1.0


@pytest.mark.parametrize("bad", [dict(mode="x"), dict(optimizer="adam"), dict(epochs=0), dict(lr_conv=0),
                                 dict(clip=-1)])
def test_schedule_validation(bad):
    with pytest.raises(ValueError):
        TrainSchedule(**bad)


def test_training_is_deterministic(patches):
    runs = []
    for _ in range(2):
        model, log = train(SRModel(CFG, seed=7), patches, QUICK, LossConfig(beta=0.1), patches, seed=3)
        runs.append(([p.value.copy() for p in model.parameters()], log))
    for a, b in zip(runs[0][0], runs[1][0]):
        np.testing.assert_array_equal(a, b)
    strip = lambda log: [(r.epoch, r.iter, r.loss, r.psnr, r.ssim) for r in log.rows]
    assert strip(runs[0][1]) == strip(runs[1][1])


def test_training_reduces_loss(patches):
    sched = TrainSchedule.scratch(epochs=1, batch_size=8, lr_conv=0.001, lr_fc=0.02, max_iterations=60,
                                  eval_every=1)
    model = SRModel(CFG, seed=0)
    from fcsr.trainer import evaluate_patches
    before = evaluate_patches(model, patches)[0]
    train(model, patches, sched, LossConfig(beta=0.0), seed=0)
    assert evaluate_patches(model, patches)[0] > before


def test_log_rows_and_csv(patches):
    sched = TrainSchedule.scratch(epochs=3, batch_size=16, lr_conv=0.001, lr_fc=0.02)
    _, log = train(SRModel(CFG), patches, sched, eval_set=patches)
    assert [r.epoch for r in log.rows] == [0, 1, 2]
    iters = [r.iter for r in log.rows]
    assert iters == sorted(set(iters))
    assert iters[-1] == 3 * math.ceil(len(patches) / 16)
    rows = list(csv.reader(io.StringIO(log.to_csv())))
    assert tuple(rows[0]) == LOG_FIELDS and len(rows) == 4
    assert math.isfinite(log.final_psnr)


def test_log_rejects_out_of_order():
    log = ConvergenceLog()
    log.append(LogRow(0, 5, 1.0, 1.0, 1.0, 0.0))
    with pytest.raises(ValueError):
        log.append(LogRow(1, 5, 1.0, 1.0, 1.0, 0.0))


def test_max_iterations_stops_early(patches):
    _, log = train(SRModel(CFG), patches, QUICK)
    assert log.rows[-1].iter == 6


def test_dataset_model_mismatch(patches):
    with pytest.raises(ValueError, match="does not match"):
        train(SRModel(ModelConfig(**{**CFG.__dict__, "scale": 2})), patches, QUICK)


def test_divergence_reports_snapshot(patches):
    bad = patches.subset(range(8))
    bad.hr[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train(SRModel(CFG), bad, QUICK)
    assert info.value.iteration == 0 and info.value.lr == 0.001


def test_finetune_freezes_features(patches, patches_x2):
    source, _ = train(SRModel(CFG, seed=1), patches, QUICK)
    before = {p.name: p.value.copy() for p in source.feature_parameters()}
    sched = TrainSchedule.finetune(epochs=2, batch_size=8, max_iterations=5, rms_eps=1e-6)
    model, log = finetune(source, 2, patches_x2, sched, eval_set=patches_x2)
    assert model.config.scale == 2
    for p in model.feature_parameters():
        assert p.frozen
        np.testing.assert_array_equal(p.value, before[p.name])
    assert log.rows[-1].iter == 5


def test_finetune_scale_mismatch(patches):
    with pytest.raises(ValueError, match="scale"):
        finetune(SRModel(CFG), 2, patches)


def test_ablation_arms_differ_only_in_axis():
    loss, sched = LossConfig(), TrainSchedule()
    head = ablation_arms("head", CFG, loss, sched)
    units = ablation_arms("unit_variant", CFG, loss, sched)
    losses = ablation_arms("loss", CFG, loss, sched)
    assert [len(head), len(units), len(losses)] == [2, 4, 2]
    assert {a.label for a in units} == {"original", "srresnet", "edsr", "ours"}
    for arms, key in ((head, "model.head"), (units, "model.unit_variant"), (losses, "loss.beta")):
        for other in arms[1:]:
            assert config_diff(arms[0], other) == [key]
    assert [a.loss_config.beta for a in losses] == [0.0, 0.1]
    with pytest.raises(ValueError):
        ablation_arms("depth", CFG, loss, sched)


def test_ablate_csv(patches):
    arms = ablate("loss", CFG, patches, QUICK, eval_set=patches)
    rows = list(csv.reader(io.StringIO(ablation_csv(arms))))
    assert rows[0] == ["arm", *LOG_FIELDS]
    assert {r[0] for r in rows[1:]} == {"l2", "edge"}


def test_transfer_axis_needs_source(patches):
    with pytest.raises(ValueError, match="source"):
        ablate("transfer", CFG, patches, QUICK)


def test_parse_and_format_kv():
    text = "# comment\nbeta = 0.2\n\nepochs=3  # inline\n"
    assert parse_kv(text) == {"beta": "0.2", "epochs": "3"}
    assert parse_kv(format_kv({"a": 1, "b": "x"})) == {"a": "1", "b": "x"}
    with pytest.raises(ValueError, match="line 1"):
        parse_kv("nonsense")


def test_resolve_settings():
    model, sched, loss, data = resolve_settings("full")
    assert model == ModelConfig() and sched == TrainSchedule() and loss == LossConfig()
    assert data == dict(stride=16, augment=False)
    model, sched, loss, data = resolve_settings("desk", {"beta": "0.3", "scale": "2.5", "augment": "yes"})
    assert model.lr_patch == PROFILES["desk"]["scratch"]["lr_patch"] and str(model.scale) == "5/2"
    assert loss.beta == 0.3 and data["augment"] is True and sched.lr_conv == 0.001
    _, sched, _, _ = resolve_settings("full", mode="finetune")
    assert sched.optimizer == "rmsprop" and sched.mode == "finetune"
    with pytest.raises(ValueError, match="unknown config keys"):
        resolve_settings("full", {"bogus": 1})
    with pytest.raises(ValueError):
        resolve_settings("huge")
