import hashlib
import json

import numpy as np
import pytest

from mangarestore.cli import run
from mangarestore.imaging import load_image, save_image
from mangarestore.trainer import DatasetManifest, read_loss_log

SE_SET = ["--set", "iterations=3", "--set", "se_channels=4", "--set", "se_downsample=2", "--set", "batch_size=2",
          "--set", "patch_size=16", "--set", "checkpoint_every=0"]
MR_SET = ["--set", "iterations=3", "--set", "mr_channels=8", "--set", "batch_size=2", "--set", "patch_size=12",
          "--set", "checkpoint_every=0"]


def _tree(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--pages", "3", "--out", str(d / "pages"), "--seed", "1", "--page-size", "64"]) == 0
    assert run(["degrade", "--dataset", str(d / "pages"), "--out", str(d / "data"), "--scale", "2"]) == 0
    assert run(["train-se", "--data", str(d / "data"), "--out", str(d / "se"), *SE_SET]) == 0
    assert run(["train-mr", "--data", str(d / "data"), "--out", str(d / "mr"), *MR_SET]) == 0
    return d


def test_synth_twice_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(["synth", "--pages", "4", "--out", str(tmp_path / name), "--seed", "7", "--page-size", "64"]) == 0
    assert (tmp_path / "a/manifest.jsonl").read_text() == (tmp_path / "b/manifest.jsonl").read_text()
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    assert capsys.readouterr().out.strip().endswith("manifest.jsonl")


def test_degrade_fixed_scale_dataset(work):
    m = DatasetManifest.load(work / "data")
    assert len(m.records) == 3 and all(r.scale == 2.0 for r in m.records)
    assert all(load_image(m.path(r.degraded_path)).shape == (32, 32) for r in m.records)


def test_degrade_single_image(tmp_path):
    src = tmp_path / "in.png"
    save_image(np.random.default_rng(0).random((40, 30)) > 0.5, src)
    assert run(["degrade", "--input", str(src), "--out", str(tmp_path / "o.png"), "--scale", "2.5",
                "--jpeg", "80", "--noise", "3"]) == 0
    assert load_image(tmp_path / "o.png").shape == (16, 12)


def test_train_commands_write_checkpoint_and_log(work):
    assert (work / "se/se_final.pt").exists() and (work / "mr/mr_final.pt").exists()
    assert len(read_loss_log(work / "se/losses.csv")) == 3
    assert len(read_loss_log(work / "mr/losses.csv")) == 3


def test_estimate_prints_bounded_scale(work, capsys):
    page = work / "pages/pages/00000.png"
    assert run(["estimate", "--model", str(work / "se/se_final.pt"), "--input", str(page), "--patch-size", "32"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("scale=")
    assert 1.0 <= float(out[0].split("=")[1]) <= 4.0
    assert out[1].split("\t")[0] == "patch" and len(out) == 2 + 4


def test_restore_given_scale_doubles_size(work, tmp_path, capsys):
    src = tmp_path / "in.png"
    save_image(np.random.default_rng(1).random((64, 64)), src)
    before = src.read_bytes()
    out = tmp_path / "out.png"
    conf = tmp_path / "conf.png"
    assert run(["restore", "--model", str(work / "mr/mr_final.pt"), "--input", str(src), "--output", str(out),
                "--scale", "2", "--confidence-out", str(conf)]) == 0
    assert load_image(out).shape == (128, 128)
    c = np.load(tmp_path / "conf.npy")
    assert c.shape == (64, 64) and c.min() >= 0 and c.max() <= 1
    meta = json.loads((tmp_path / "out.png.json").read_text())
    assert meta["scale_source"] == "given" and meta["scale"] == 2.0 and meta["output_size"] == [128, 128]
    assert src.read_bytes() == before
    assert "scale=2.000" in capsys.readouterr().out


def test_restore_estimated_scale_is_echoed(work, tmp_path):
    src = work / "data/degraded/00000.png"
    out = tmp_path / "r.png"
    assert run(["restore", "--model", str(work / "mr/mr_final.pt"), "--se-model", str(work / "se/se_final.pt"),
                "--input", str(src), "--output", str(out), "--patch-size", "16", "--binarize"]) == 0
    meta = json.loads((tmp_path / "r.png.json").read_text())
    assert meta["scale_source"] == "estimated" and meta["scale"] == meta["estimated_scale"]
    assert 1.0 <= meta["scale"] <= 4.0
    img = load_image(out)
    assert list(img.shape) == meta["output_size"]
    assert set(np.unique(img)) <= {0.0, 1.0}


def test_restore_needs_scale_or_model(work, tmp_path):
    src = work / "data/degraded/00000.png"
    assert run(["restore", "--model", str(work / "mr/mr_final.pt"), "--input", str(src),
                "--output", str(tmp_path / "x.png")]) == 2
    assert not (tmp_path / "x.png").exists()


def test_evaluate_reports_all_methods(work, tmp_path, capsys):
    ext = tmp_path / "ext"
    m = DatasetManifest.load(work / "data")
    for r in m.records:
        save_image(load_image(m.path(r.gt_path)), ext / f"{r.id}.png")
    report = tmp_path / "eval.json"
    before = _tree(work / "data")
    assert run(["evaluate", "--data", str(work / "data"), "--out", str(report), "--mr-model",
                str(work / "mr/mr_final.pt"), "--se-model", str(work / "se/se_final.pt"), "--patch-size", "16",
                "--method", f"oracle={ext}"]) == 0
    assert _tree(work / "data") == before
    rep = json.loads(report.read_text())
    assert set(rep["restoration"]) == {"bicubic", "ours", "oracle"}
    assert rep["restoration"]["oracle"]["aggregate"]["psnr"] == 100.0
    assert rep["scale"]["buckets"]["[1,2]"]["n"] == 3
    rows = (tmp_path / "eval.csv").read_text().splitlines()
    assert rows[0] == "method,id,psnr,ssim,svae,coverage"
    assert "scale_accuracy=" in capsys.readouterr().out


def test_config_file_supplies_defaults(work, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(f"data = {work / 'data'}\nout = {tmp_path / 'se'}\niterations = 2\nse_channels = 4\n"
                   "se_downsample = 2\nbatch_size = 1\npatch_size = 16\ncheckpoint_every = 0\n")
    assert run(["--config", str(cfg), "train-se"]) == 0
    assert len(read_loss_log(tmp_path / "se/losses.csv")) == 2
    assert run(["--config", str(cfg), "train-se", "--set", "iterations=1", "--out", str(tmp_path / "se2")]) == 0
    assert len(read_loss_log(tmp_path / "se2/losses.csv")) == 1


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["synth", "--out", "x"],
    ["synth", "--pages", "two", "--out", "x"],
    ["train-se", "--data", "d", "--out", "o", "--set", "nonsense"],
    ["train-se", "--data", "d", "--out", "o", "--set", "learning_rate=1"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert run(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key_exit_2(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("colour = blue\n")
    assert run(["--config", str(cfg), "synth", "--pages", "1", "--out", str(tmp_path / "o")]) == 2


def test_runtime_errors_exit_1(tmp_path, work, capsys):
    assert run(["estimate", "--model", str(tmp_path / "missing.pt"), "--input", str(tmp_path / "none.png")]) == 1
    assert "estimate failed" in capsys.readouterr().err
    assert run(["restore", "--model", str(work / "se/se_final.pt"), "--input",
                str(work / "data/degraded/00000.png"), "--output", str(tmp_path / "o.png"), "--scale", "2"]) == 1


def test_embed_fit_writes_projection(tmp_path):
    out = tmp_path / "emb.json"
    assert run(["embed-fit", "--out", str(out), "--seed", "0"]) == 0
    assert json.loads(out.read_text())
