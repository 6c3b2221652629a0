import csv
import json

import numpy as np
import pytest

from lcforge.cli import RunConfig, ConfigError, parse_epsilon, run
from lcforge.data import synthetic_cifar
from lcforge.models import spatial_layers
from lcforge.trainer import load_checkpoint

SMALL = ["--depth", "8", "--width", "4", "--epochs", "2", "--batch-size", "25", "--lr", "0.05"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    return str(synthetic_cifar(tmp_path_factory.mktemp("cifar"), n_train=100, n_test=40, seed=0))


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = ["train", "--data-dir", data_dir, "--out", str(out), "--frozen", "--expansion", "8", *SMALL]
    assert run(args) == 0
    return out


def test_train_artifacts(trained):
    assert {p.name for p in trained.iterdir()} >= {"model.ckpt", "history.csv", "manifest.json"}
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["spec"]["frozen_spatial"] is True and manifest["spec"]["expansion"] == 8
    assert manifest["config"]["frozen"] is True
    assert {"seed", "git_describe", "wall_time_s"} <= set(manifest)
    rows = list(csv.reader((trained / "history.csv").read_text().splitlines()))
    assert rows[0] == ["epoch", "train_loss", "val_acc", "lr"] and len(rows) == 3
    assert float(rows[-1][3]) == 0.0


def test_train_is_byte_reproducible(trained, data_dir, tmp_path):
    args = ["train", "--data-dir", data_dir, "--out", str(tmp_path), "--frozen", "--expansion", "8", *SMALL]
    assert run(args) == 0
    assert (tmp_path / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()
    assert (tmp_path / "model.ckpt").read_bytes() == (trained / "model.ckpt").read_bytes()


def test_train_resume_from_checkpoint(data_dir, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run(["train", "--data-dir", data_dir, "--out", str(full), *SMALL, "--epochs", "3"]) == 0
    assert run(["train", "--data-dir", data_dir, "--out", str(part), *SMALL, "--epochs", "3",
                "--stop-after", "1"]) == 0
    assert load_checkpoint(part / "model.ckpt").state.epoch == 1
    resumed = tmp_path / "resumed"
    assert run(["train", "--data-dir", data_dir, "--out", str(resumed), *SMALL, "--epochs", "3",
                "--checkpoint", str(part / "model.ckpt")]) == 0
    assert (resumed / "history.csv").read_bytes() == (full / "history.csv").read_bytes()
    assert (resumed / "model.ckpt").read_bytes() == (full / "model.ckpt").read_bytes()


def test_missing_dataset_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope"
    assert run(["train", "--data-dir", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_config_file_and_overrides(tmp_path, data_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"depth": 8, "width": 4, "epochs": 1, "batch_size": 50, "seed": 3,
                               "data_dir": data_dir}))
    out = tmp_path / "o"
    assert run(["train", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["config"]["depth"] == 8
    cfg.write_text(json.dumps({"depth": 8, "warmup": 2}))
    assert run(["train", "--config", str(cfg)]) == 2
    cfg.write_text("{not json")
    assert run(["train", "--config", str(cfg)]) == 2
    assert run(["train", "--data-dir", data_dir, "--depth", "9"]) == 2


def test_parse_epsilon():
    assert parse_epsilon("1/255") == 1 / 255
    assert parse_epsilon(0.5) == 0.5
    with pytest.raises(ConfigError):
        parse_epsilon("-1/255")
    with pytest.raises(ConfigError):
        parse_epsilon("abc")
    with pytest.raises(ConfigError):
        RunConfig(draws=5).validate()


def test_evaluate(trained, data_dir, tmp_path):
    assert run(["evaluate", "--checkpoint", str(trained / "model.ckpt"), "--data-dir", data_dir,
                "--out", str(tmp_path)]) == 0
    preds = np.load(tmp_path / "predictions.npy")
    report = json.loads((tmp_path / "evaluate.json").read_text())
    assert preds.shape == (40,) and report["n"] == 40


def test_fold_outputs(trained, tmp_path):
    assert run(["fold", "--checkpoint", str(trained / "model.ckpt"), "--out", str(tmp_path)]) == 0
    ck = load_checkpoint(trained / "model.ckpt")
    model = ck.build_model()
    names = [n for n, _ in spatial_layers(model)]
    for name in names:
        blob = np.fromfile(tmp_path / f"{name}.f32", dtype="<f4")
        assert blob.size == dict(model.named_modules())[name].fold().size
        assert (tmp_path / f"{name}.pgm").read_bytes().startswith(b"P5\n")
    folded = load_checkpoint(tmp_path / "folded.ckpt")
    assert not folded.spec.use_lc


def test_fold_refusals(data_dir, tmp_path, capsys):
    base = tmp_path / "base"
    assert run(["train", "--data-dir", data_dir, "--out", str(base), "--baseline", *SMALL, "--epochs", "1"]) == 0
    assert run(["fold", "--checkpoint", str(base / "model.ckpt"), "--out", str(tmp_path / "f")]) == 0
    assert "nothing to fold" in capsys.readouterr().out
    inter = tmp_path / "inter"
    assert run(["train", "--data-dir", data_dir, "--out", str(inter), "--intermediate", "bnrelu", "--expansion",
                "2", *SMALL, "--epochs", "1"]) == 0
    assert run(["fold", "--checkpoint", str(inter / "model.ckpt"), "--out", str(tmp_path / "g")]) == 3
    assert "intermediate operation" in capsys.readouterr().err
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage" * 10)
    assert run(["fold", "--checkpoint", str(bad), "--out", str(tmp_path / "h")]) == 2
    assert run(["fold", "--out", str(tmp_path / "h")]) == 2


def test_analyze(trained, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        assert run(["analyze", "--checkpoint", str(trained / "model.ckpt"), "--out", str(out), "--draws", "30"]) == 0
    rows = list(csv.DictReader((out1 / "entropy.csv").read_text().splitlines()))
    model = load_checkpoint(trained / "model.ckpt").build_model()
    layers = [n for n, _ in spatial_layers(model)]
    assert sorted({r["layer"] for r in rows}) == sorted(layers)
    assert {r["metric"] for r in rows} >= {"variance_entropy", "normalized_variance_entropy"}
    for name in (layers[0], layers[-1]):
        for f in (f"heatmap_{name}.csv", f"heatmap_{name}.pgm", f"filters_{name}.pgm"):
            assert (out1 / f).read_bytes() == (out2 / f).read_bytes()
    assert (out1 / "entropy.csv").read_bytes() == (out2 / "entropy.csv").read_bytes()


def test_analyze_fresh_checkpoint_first_layer_near_random(data_dir, tmp_path):
    # a wider stem gives enough kernels for a stable estimate; the stem of a fresh frozen model is random
    out = tmp_path / "fresh"
    assert run(["train", "--data-dir", data_dir, "--out", str(out), "--depth", "8", "--width", "32", "--frozen",
                "--epochs", "1", "--lr", "1e-12", "--batch-size", "100"]) == 0
    assert run(["analyze", "--checkpoint", str(out / "model.ckpt"), "--out", str(out / "an"), "--draws", "30"]) == 0
    rows = {(r["layer"], r["metric"]): r["value"]
            for r in csv.DictReader((out / "an" / "entropy.csv").read_text().splitlines())}
    assert abs(float(rows[("stem", "normalized_variance_entropy")]) - 1.0) <= 0.05


def test_attack(trained, data_dir, tmp_path):
    assert run(["attack", "--checkpoint", str(trained / "model.ckpt"), "--data-dir", data_dir, "--out",
                str(tmp_path), "--epsilon", "8/255", "0", "1/255"]) == 0
    rows = list(csv.DictReader((tmp_path / "attack.csv").read_text().splitlines()))
    eps = [float(r["epsilon"]) for r in rows]
    assert eps == sorted(eps) == [0.0, 1 / 255, 8 / 255]
    assert rows[0]["clean_acc"] == rows[0]["robust_acc"]
    assert all(float(r["robust_acc"]) <= float(r["clean_acc"]) for r in rows)


def test_thread_cap_env(trained, data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("LCFORGE_THREADS", "1")
    assert run(["evaluate", "--checkpoint", str(trained / "model.ckpt"), "--data-dir", data_dir,
                "--out", str(tmp_path)]) == 0
