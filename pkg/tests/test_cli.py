import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from decoder_attribution.attribution import CalibrationProfile
from decoder_attribution.cli import main
from decoder_attribution.config import DEFAULTS, ConfigError, load_config
from decoder_attribution.data import save_png
from decoder_attribution.manifest import RunManifest
from decoder_attribution.metrics import confusion
from decoder_attribution.models import load_checkpoint, sample_belongings

LINEAR_CFG = """\
seed: 3
dataset:
  n_images: 40
  image_shape: [3, 16, 16]
model:
  kind: linear
calibration:
  n: 10
evaluation:
  n_belonging: 12
  n_other: 12
  efficiency_samples: 4
"""

TINY_VAE_CFG = """\
seed: 0
dataset:
  n_images: 96
  image_shape: [3, 16, 16]
model:
  kind: continuous
  widths: [8, 16]
training:
  epochs: 1
  batch_size: 32
  target_mse: null
inversion:
  max_steps: 8
calibration:
  n: 8
evaluation:
  n_belonging: 10
  n_other: 10
  efficiency_samples: 3
  robustness:
    - {kind: brightness, parameter: 1.0}
    - {kind: gaussian_noise, parameter: 0.02}
"""


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_config_defaults_and_merge():
    assert load_config() == DEFAULTS
    cfg = load_config(text="model:\n  kind: quantized\n")
    assert cfg["model"]["kind"] == "quantized"
    assert cfg["model"]["widths"] == DEFAULTS["model"]["widths"]


@pytest.mark.parametrize(
    "text,needle",
    [
        ("seed: 1\nmodel:\n  kindd: linear\n", "line 3"),
        ("seed: [1\n", "line 2"),
        ("model: 3\n", "line 1"),
        ("- a\n- b\n", "mapping"),
    ],
)
def test_config_errors_carry_locations(text, needle):
    with pytest.raises(ConfigError, match=needle):
        load_config(text=text)


def test_train_is_deterministic_and_writes_manifest(tmp_path, capsys):
    cfg = _write(tmp_path, "lin.yaml", LINEAR_CFG)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    a = load_checkpoint(tmp_path / "a" / "model.npz")
    b = load_checkpoint(tmp_path / "b" / "model.npz")
    assert a.content_hash() == b.content_hash()
    manifest = RunManifest.load(tmp_path / "a" / "manifest.json")
    assert manifest.command == "train"
    assert manifest.seed == 3
    assert str(tmp_path / "a" / "model.npz") in manifest.artifact_paths
    assert manifest.config_snapshot["model"]["kind"] == "linear"
    assert manifest.git_or_content_hash


def test_train_tiny_vae_twice_same_hash(tmp_path):
    cfg = _write(tmp_path, "vae.yaml", TINY_VAE_CFG)
    for d in ("x", "y"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    x = load_checkpoint(tmp_path / "x" / "model.npz")
    y = load_checkpoint(tmp_path / "y" / "model.npz")
    assert x.model_id == y.model_id
    assert x.trained


def test_usage_and_config_errors_exit_1(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 1
    assert "missing.yaml" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["calibrate"])
    assert info.value.code == 1
    assert main(["calibrate", "--model", str(tmp_path / "nope.npz")]) == 1


@pytest.fixture()
def trained_linear(tmp_path):
    cfg = _write(tmp_path, "lin.yaml", LINEAR_CFG)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    return tmp_path / "run" / "model.npz"


def test_calibrate_defaults_and_degenerate_warning(trained_linear, tmp_path, capsys):
    capsys.readouterr()
    out = tmp_path / "profile.json"
    assert main(["calibrate", "--model", str(trained_linear), "--out", str(out)]) == 0
    captured = capsys.readouterr()
    assert "sigma=0" in captured.err
    profile = CalibrationProfile.load(out)
    assert profile.summary.n == 100
    assert profile.summary.alpha == 0.05
    assert profile.threshold == profile.summary.mu == 0.0
    assert CalibrationProfile.load(out) == profile
    assert (tmp_path / "profile.manifest.json").exists()


def test_calibrate_flags_override(trained_linear, tmp_path):
    out = tmp_path / "p.json"
    args = ["calibrate", "--model", str(trained_linear), "--out", str(out), "--n", "5", "--alpha", "0.1", "--init", "random", "--steps", "7", "--lr", "0.02", "--stop", "adaptive", "--seed", "4"]
    assert main(args) == 0
    p = CalibrationProfile.load(out)
    assert (p.summary.n, p.summary.alpha, p.seed) == (5, 0.1, 4)
    inv = p.inversion_config
    assert (inv.init_mode, inv.max_steps, inv.learning_rate, inv.stop_rule) == ("random", 7, 0.02, "adaptive")


def test_attribute_lines_csv_and_partial_failure(trained_linear, tmp_path, capsys):
    profile = tmp_path / "profile.json"
    assert main(["calibrate", "--model", str(trained_linear), "--n", "10", "--out", str(profile)]) == 0
    model = load_checkpoint(trained_linear)
    folder = tmp_path / "imgs"
    folder.mkdir()
    for i, x in enumerate(sample_belongings(model, 3, seed=8)):
        save_png(folder / f"b{i}.png", x)
    save_png(folder / "noisy.png", np.clip(sample_belongings(model, 1, seed=9)[0] + np.random.default_rng(0).normal(0, 0.1, (3, 16, 16)), 0, 1))
    capsys.readouterr()

    assert main(["attribute", "--profile", str(profile), "--model", str(trained_linear), str(folder / "b0.png"), "--out", str(tmp_path / "one.csv")]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("belonging cost=0.0 threshold=0.0")

    (folder / "zz_corrupt.png").write_bytes(b"\x89PNG not really")
    code = main(["attribute", "--profile", str(profile), "--model", str(trained_linear), str(folder), "--out", str(tmp_path / "v.csv")])
    assert code == 3
    with open(tmp_path / "v.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5
    labels = {r["path"].split("/")[-1]: r["label"] for r in rows}
    assert labels == {"b0.png": "belonging", "b1.png": "belonging", "b2.png": "belonging", "noisy.png": "non_belonging", "zz_corrupt.png": "error"}
    assert rows[-1]["error"]


def test_attribute_rejects_wrong_model(trained_linear, tmp_path):
    profile = tmp_path / "p.json"
    assert main(["calibrate", "--model", str(trained_linear), "--n", "5", "--out", str(profile)]) == 0
    other_cfg = _write(tmp_path, "o.yaml", LINEAR_CFG.replace("seed: 3", "seed: 4"))
    assert main(["train", "--config", str(other_cfg), "--out", str(tmp_path / "o")]) == 0
    img = tmp_path / "x.png"
    save_png(img, np.zeros((3, 16, 16)))
    assert main(["attribute", "--profile", str(profile), "--model", str(tmp_path / "o" / "model.npz"), str(img)]) == 1


def test_evaluate_report_schema_and_cross_check(tmp_path, capsys):
    cfg = _write(tmp_path, "vae.yaml", TINY_VAE_CFG)
    out = tmp_path / "ev"
    assert main(["evaluate", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    sep = report["separation"]
    assert {"acc", "auroc", "confusion"} <= set(sep)
    with open(out / "verdicts.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20
    recomputed = confusion([r["label"] for r in rows if r["set"] == "belonging"], [r["label"] for r in rows if r["set"] == "other"])
    assert recomputed.accuracy == sep["acc"]
    assert set(report["efficiency"]) == {"encoder", "random"}
    for entry in report["efficiency"].values():
        assert "median_convergence_step" in entry
    assert {"acc_fixed", "acc_adaptive"} <= set(report["stopping"])
    assert report["separation_alternative_init"]["max_steps"] == 8
    with open(out / "robustness.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["augmentation", "parameter", "acc", "ssim", "psnr", "l1", "l2"]
    assert float(table[1][2]) == sep["acc"]  # brightness 1.0 row
    manifest = RunManifest.load(out / "manifest.json")
    for name in ("report.json", "verdicts.csv", "robustness.csv", "profile.json", "manifest.json"):
        assert str(out / name) in manifest.artifact_paths
    assert {"calibrate", "separation", "efficiency"} <= set(manifest.timings)

    # Second run reuses cached models and reproduces the verdicts.
    out2 = tmp_path / "ev2"
    assert main(["evaluate", "--config", str(cfg), "--out", str(out2)]) == 0
    assert (out / "verdicts.csv").read_text() == (out2 / "verdicts.csv").read_text()


def test_robustness_command(tmp_path, capsys):
    cfg = _write(tmp_path, "lin.yaml", LINEAR_CFG)
    out = tmp_path / "rob"
    assert main(["robustness", "--config", str(cfg), "--out", str(out)]) == 0
    with open(out / "robustness.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["augmentation"] for r in rows[:2]] == ["brightness", "gaussian_noise"]
    assert len(rows) == 7
    assert rows[0]["acc"] == rows[1]["acc"] == "1.0"


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "decoder_attribution.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("train", "calibrate", "attribute", "evaluate", "robustness"):
        assert name in proc.stdout
