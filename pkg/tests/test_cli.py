import csv
import io

import numpy as np
import pytest
from skimage import data

from fcsr import cli
from fcsr.checkpoint import checkpoint_load, load, save
from fcsr.imaging import bicubic_resample, read_png, to_uint8, write_png
from fcsr.model import ModelConfig, SRModel

TINY = ModelConfig(scale=2, lr_patch=8, num_blocks=2, ident_dim=8, bottleneck_dim=4, final_dim=2, units_per_block=2)
QUICK = "epochs = 2\nmax_iterations = 3\nbatch_size = 8\nident_dim = 8\nbottleneck_dim = 4\nfinal_dim = 2\n"


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    base = tmp_path_factory.mktemp("data")
    hr = base / "toy" / "HR"
    hr.mkdir(parents=True)
    write_png(hr / "a.png", data.camera()[100:160, 100:172])
    write_png(hr / "b.png", data.astronaut()[50:110, 200:254])
    (base / "quick.cfg").write_text(QUICK)
    return base


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def zero_checkpoint(path, config=TINY):
    model = SRModel(config)
    for p in model.parameters():
        p.value[...] = 0
    save(path, model)
    return path


def test_usage_errors_exit_1(capsys, tmp_path):
    assert run(capsys)[0] == 1
    assert run(capsys, "train")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    code, _, err = run(capsys, "inspect", "--model", tmp_path / "missing.fcsr")
    assert code == 1 and "missing.fcsr" in err
    (tmp_path / "junk.fcsr").write_bytes(b"JUNKJUNKJUNK")
    code, _, err = run(capsys, "inspect", "--model", tmp_path / "junk.fcsr")
    assert code == 1 and "magic" in err


def test_inspect(capsys, tmp_path):
    path = zero_checkpoint(tmp_path / "m.fcsr")
    code, out, _ = run(capsys, "inspect", "--model", path)
    assert code == 0
    n = load(path).parameter_count()
    assert f"parameters: {n} (closed form {n})" in out
    assert "recon.weight" in out and "format version: 1" in out


def test_sr_with_zero_model_is_bicubic(capsys, tmp_path):
    path = zero_checkpoint(tmp_path / "m.fcsr")
    lr = data.camera()[:40, :48]
    write_png(tmp_path / "in.png", lr)
    code, _, _ = run(capsys, "sr", "--model", path, "--input", tmp_path / "in.png", "--out", tmp_path / "out.png")
    assert code == 0
    expected = to_uint8(bicubic_resample(lr.astype(np.float64), 2, antialias=False))
    np.testing.assert_array_equal(read_png(tmp_path / "out.png"), expected)


def test_sr_colour(capsys, tmp_path):
    path = zero_checkpoint(tmp_path / "m.fcsr")
    write_png(tmp_path / "in.png", data.astronaut()[:30, :40])
    assert run(capsys, "sr", "--model", path, "--input", tmp_path / "in.png", "--out", tmp_path / "o.png")[0] == 0
    assert read_png(tmp_path / "o.png").shape == (60, 80, 3)


def test_eval_bicubic_and_checkpoint(capsys, root, tmp_path):
    code, out, _ = run(capsys, "eval", "--root", root, "--dataset", "toy", "--scale", 2)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["image"] for r in rows] == ["a", "b", "mean"]
    path = zero_checkpoint(tmp_path / "m.fcsr")
    code, _, _ = run(capsys, "eval", "--root", root, "--dataset", "toy", "--method", "checkpoint", "--model", path,
                     "--out", tmp_path / "r.csv")
    assert code == 0
    again = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert [r["psnr_db"] for r in again] == [r["psnr_db"] for r in rows]
    assert run(capsys, "eval", "--root", root, "--dataset", "toy", "--method", "checkpoint")[0] == 1
    assert run(capsys, "eval", "--root", root, "--dataset", "nope", "--scale", 2)[0] == 1


def test_prepare(capsys, root):
    assert run(capsys, "prepare", "--root", root, "--dataset", "toy", "--scale", 3)[0] == 0
    assert (root / "toy" / "LR_x3").is_dir()


def test_train_then_finetune(capsys, root, tmp_path):
    cfg = root / "quick.cfg"
    code, _, _ = run(capsys, "train", "--root", root, "--dataset", "toy", "--scale", 3, "--config", cfg,
                     "--out", tmp_path / "x3", "--eval-dataset", "toy")
    assert code == 0
    model, opt, loss = checkpoint_load((tmp_path / "x3" / "model.fcsr").read_bytes(), with_extras=True)
    assert model.config.scale == 3 and opt.kind == "sgd-momentum" and loss.beta == 0.1
    log = list(csv.DictReader(open(tmp_path / "x3" / "log.csv")))
    assert 0 < int(log[-1]["iter"]) <= 3
    code, _, _ = run(capsys, "finetune", "--root", root, "--dataset", "toy", "--scale", 2, "--config", cfg,
                     "--model", tmp_path / "x3" / "model.fcsr", "--out", tmp_path / "x2")
    assert code == 0
    tuned, opt, _ = checkpoint_load((tmp_path / "x2" / "model.fcsr").read_bytes(), with_extras=True)
    assert tuned.config.scale == 2 and opt.kind == "rmsprop"
    for p, q in zip(model.feature_parameters(), tuned.feature_parameters()):
        np.testing.assert_array_equal(p.value, q.value)


def test_ablate(capsys, root, tmp_path):
    code, _, err = run(capsys, "ablate", "--root", root, "--dataset", "toy", "--scale", 2,
                       "--config", root / "quick.cfg", "--out", tmp_path)
    assert code == 0 and "skipping transfer" in err
    for axis, arms in (("head", 2), ("unit_variant", 4), ("loss", 2)):
        rows = list(csv.DictReader(open(tmp_path / f"ablation_{axis}.csv")))
        assert len({r["arm"] for r in rows}) == arms
    assert run(capsys, "ablate", "--root", root, "--dataset", "toy", "--axis", "transfer", "--out", tmp_path)[0] == 1


def test_bad_config_key(capsys, root, tmp_path):
    (tmp_path / "bad.cfg").write_text("wings = 2\n")
    code, _, err = run(capsys, "train", "--root", root, "--dataset", "toy", "--config", tmp_path / "bad.cfg",
                       "--out", tmp_path)
    assert code == 1 and "wings" in err


def test_gradcheck_verb(capsys, monkeypatch):
    code, out, _ = run(capsys, "gradcheck", "--seeds", 1, "--skip-model")
    assert code == 0 and "PASS conv2d" in out and "FAIL" not in out
    monkeypatch.setattr(cli.gradcheck, "TOLERANCE", 0.0)
    from fcsr.gradcheck import CheckResult
    monkeypatch.setattr(cli.gradcheck, "run_suite", lambda *a, **k: [CheckResult("conv2d", 0, 1.0)])
    code, out, _ = run(capsys, "gradcheck", "--seeds", 1)
    assert code == 3 and "FAIL conv2d" in out


def test_inspect_default_checkpoint(capsys, tmp_path):
    path = tmp_path / "default.fcsr"
    save(path, SRModel(ModelConfig(), seed=0))
    code, out, _ = run(capsys, "inspect", "--model", path)
    path.unlink()
    assert code == 0
    assert "  recon.weight 8192x9216 75497472\n" in out
