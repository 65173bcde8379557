import json
import subprocess
import sys

import numpy as np
import pytest

from advseg.cli import main
from advseg.data import PALETTE, import_ppm, load_dataset


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "synth.json"
    cfg.write_text(json.dumps({"phantom": {"size": [64, 64]}, "n_train": 2, "n_test": 2, "seed": 1}))
    assert main(["synth", "--out", str(root / "data"), "--config", str(cfg)]) == 0
    train = root / "train.json"
    train.write_text(json.dumps({"batch_baseline": 6, "batch_adversarial_each": 2, "patches_per_class_per_image": 2,
                                 "epochs": 1}))
    return root


def test_synth_default(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d")]) == 0
    ds = load_dataset(tmp_path / "d")
    assert (len(ds.train), len(ds.test), ds.class_count) == (15, 10, 7)
    assert ds.train[0].image.shape == (128, 128)


def test_synth_bytes_identical(tmp_path, small_data):
    cfg = str(small_data / "synth.json")
    main(["synth", "--out", str(tmp_path / "a"), "--config", cfg])
    main(["synth", "--out", str(tmp_path / "b"), "--config", cfg])
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_missing_config_usage(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--config", str(tmp_path / "nope.json")]) != 0
    err = capsys.readouterr().err
    assert "usage:" in err and "not found" in err


def test_missing_required_flag_exits(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--net", "fcn"])
    assert e.value.code != 0
    assert "usage:" in capsys.readouterr().err


def test_train_banner_and_outputs(tmp_path, small_data, capsys):
    out = tmp_path / "fcn"
    rc = main(["train", "--data", str(small_data / "data"), "--net", "fcn", "--adversarial", "false",
               "--config", str(small_data / "train.json"), "--out", str(out)])
    assert rc == 0
    cap = capsys.readouterr()
    assert "140,039 trainable" in cap.err and cap.out == ""
    assert (out / "manifest.json").exists()
    rows = (tmp_path / "fcn.losses.csv").read_text().splitlines()
    assert rows[0] == "step,L_s,L_d,L_a" and len(rows) == 1 + (2 * 7 * 2) // 6


def test_train_dilated_banner(tmp_path, small_data, capsys):
    rc = main(["train", "--data", str(small_data / "data"), "--net", "dilated", "--config",
               str(small_data / "train.json"), "--out", str(tmp_path / "d"), "--stop-after", "1"])
    assert rc == 0
    assert "receptive field 67" in capsys.readouterr().err


def test_flag_overrides_config(tmp_path, small_data):
    main(["train", "--data", str(small_data / "data"), "--net", "fcn", "--config", str(small_data / "train.json"),
          "--out", str(tmp_path / "c"), "--epochs", "0", "--seed", "4"])
    meta = json.loads((tmp_path / "c" / "manifest.json").read_text())["meta"]
    assert meta["config"]["epochs"] == 0 and meta["config"]["seed"] == 4
    assert meta["config"]["batch_baseline"] == 6  # from the file


def test_resume_identical(tmp_path, small_data):
    args = ["train", "--data", str(small_data / "data"), "--net", "fcn", "--adversarial", "true", "--config",
            str(small_data / "train.json")]
    assert main(args + ["--out", str(tmp_path / "full")]) == 0
    assert main(args + ["--out", str(tmp_path / "part"), "--stop-after", "3"]) == 0
    assert main(args + ["--out", str(tmp_path / "part"), "--resume"]) == 0
    for f in (tmp_path / "full").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "part" / f.relative_to(tmp_path / "full")).read_bytes()
    assert (tmp_path / "full.losses.csv").read_text() == (tmp_path / "part.losses.csv").read_text()


@pytest.fixture(scope="module")
def trained(small_data):
    ck = small_data / "ck"
    main(["train", "--data", str(small_data / "data"), "--net", "fcn", "--config", str(small_data / "train.json"),
          "--out", str(ck)])
    return ck


def test_segment_palette(tmp_path, small_data, trained):
    src = small_data / "data" / "train" / "ph000_img.pgm"
    assert main(["segment", "--ckpt", str(trained), "--in", str(src), "--out", str(tmp_path / "s.ppm")]) == 0
    rgb = import_ppm(tmp_path / "s.ppm")
    assert rgb.shape == (64, 64, 3)
    assert {tuple(c) for c in rgb.reshape(-1, 3)} <= {tuple(c) for c in PALETTE}


def test_eval_self(tmp_path, small_data, trained, capsys):
    rc = main(["eval", "--ckpt-a", str(trained), "--ckpt-b", str(trained), "--data", str(small_data / "data")])
    assert rc == 0
    cap = capsys.readouterr()
    rep = json.loads(cap.out)  # stdout carries only the report
    assert set(rep["models"]) == {"a", "b"}
    for entry in rep["t_tests"].values():
        assert "error" in entry or entry["t"] == 0
    assert main(["eval", "--ckpt-a", str(trained), "--ckpt-b", str(trained), "--data", str(small_data / "data"),
                 "--out", str(tmp_path / "r.json")]) == 0
    assert json.loads((tmp_path / "r.json").read_text()) == rep


def test_eval_class_mismatch(tmp_path, trained, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"phantom": {"size": [64, 64], "C": 4}, "n_train": 1, "n_test": 1}))
    main(["synth", "--out", str(tmp_path / "d4"), "--config", str(cfg)])
    rc = main(["eval", "--ckpt-a", str(trained), "--ckpt-b", str(trained), "--data", str(tmp_path / "d4")])
    assert rc != 0 and "classes" in capsys.readouterr().err


def test_gradcheck_discriminator_five_seeds():
    assert main(["gradcheck", "--net", "discriminator", "--seeds", "5"]) == 0


def test_inspect(capsys, trained):
    assert main(["inspect", "--net", "dilated"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["receptive_field"] == 67 and info["trainable_conv_params"] == 56_039
    assert main(["inspect", "--ckpt", str(trained)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["networks"]["seg"]["trainable_conv_params"] == 140_039


def test_bad_thread_env(monkeypatch, capsys):
    monkeypatch.setenv("ADVSEG_THREADS", "zero")
    assert main(["inspect", "--net", "fcn"]) == 2
    monkeypatch.setenv("ADVSEG_THREADS", "1")
    assert main(["inspect", "--net", "fcn"]) == 0


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "advseg", "inspect", "--net", "fcn", "--classes", "8"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["trainable_conv_params"] == 140_296
    r = subprocess.run([sys.executable, "-m", "advseg", "segment", "--ckpt", str(tmp_path / "none"), "--in", "x",
                        "--out", "y"], capture_output=True, text=True)
    assert r.returncode == 1 and r.stdout == "" and "manifest" in r.stderr
