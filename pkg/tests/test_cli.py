import csv
import json

import numpy as np
import pytest

from vdit_lab.cli import main
from vdit_lab.model import DenoiseSchedule, ModelConfig, build_model
from vdit_lab.serialization import read_trace, save_checkpoint
from vdit_lab.sparsity import exclusion_sweep

from tests.conftest import TINY


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"model": TINY}))
    return str(p)


def cli(*args):
    return main([str(a) for a in args])


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_generate_deterministic(tmp_path, cfg_file):
    for name in ("a", "b"):
        assert cli("generate", "--config", cfg_file, "--out", tmp_path / name, "--emit-heatmaps",
                   "--capture", "layer=0") == 0
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    assert "manifest.json" in a and any(k.startswith("heatmaps/") for k in a)


def test_generate_zero_steps(tmp_path, cfg_file):
    assert cli("generate", "--config", cfg_file, "--steps", 0, "--out", tmp_path) == 0
    assert np.array_equal(np.load(tmp_path / "noise.npy"), np.load(tmp_path / "latents.npy"))


def test_capture_cardinality(tmp_path, cfg_file):
    assert cli("generate", "--config", cfg_file, "--capture", "layer=0", "--out", tmp_path) == 0
    tr = read_trace(tmp_path / "trace.atrc")
    assert len(tr.records) == TINY["num_heads"] * TINY["steps"]


def test_sparsity_reports(tmp_path, cfg_file):
    assert cli("sweep-sparsity", "--config", cfg_file, "--k", "0", "--out", tmp_path / "z") == 0
    rows = list(csv.DictReader(open(tmp_path / "z" / "sparsity.csv")))
    assert [r["mse"] for r in rows] == ["0.0"]
    assert cli("sweep-sparsity", "--config", cfg_file, "--k", "0.1,0.3,0.5,0.7", "--out", tmp_path / "f") == 0
    rows = list(csv.DictReader(open(tmp_path / "f" / "sparsity.csv")))
    assert len(rows) == 4
    model = build_model(ModelConfig(**TINY))
    lib = exclusion_sweep(model, 0, [0.1, 0.3, 0.5, 0.7], schedule=DenoiseSchedule.linear(TINY["steps"]))
    assert [float(r["mse"]) for r in rows] == [r.mse for r in lib]


def test_layer_sensitivity_and_temperature(tmp_path, cfg_file):
    assert cli("layer-sensitivity", "--config", cfg_file, "--k", "0.3", "--out", tmp_path / "l") == 0
    assert len(list(csv.DictReader(open(tmp_path / "l" / "layer_sensitivity.csv")))) == TINY["num_layers"]
    assert cli("temperature", "--config", cfg_file, "--layers", "1", "--temperature", "0.2,1,1.2",
               "--out", tmp_path / "t") == 0
    pts = json.loads((tmp_path / "t" / "temperature.json").read_text())["points"]
    assert pts[1]["mse"] == 0.0 and pts[0]["mean_entropy"] < pts[1]["mean_entropy"] < pts[2]["mean_entropy"]


def test_sinks_empty_report(tmp_path, cfg_file):
    assert cli("sinks", "--config", cfg_file, "--seed", "0,1", "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "sinks.json").read_text())
    assert rep["total_flags"] == 0 and rep["runs"] == 2 and rep["spatial_histogram"] == {}


def test_skip_heads(tmp_path, cfg_file):
    assert cli("skip-heads", "--config", cfg_file, "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "skip_heads.json").read_text())
    assert rep["detected_sinks"]["count"] == rep["random_matched"]["count"] == 0


def test_transfer_self_identity(tmp_path, cfg_file):
    assert cli("transfer", "--config", cfg_file, "--layers", "all", "--same-prompt", "--same-seed",
               "--out", tmp_path / "a") == 0
    assert json.loads((tmp_path / "a" / "transfer.json").read_text())["mse_to_source"] == 0.0
    assert cli("transfer", "--config", cfg_file, "--trace", tmp_path / "a" / "source_trace.atrc",
               "--target-seed", 4, "--same-seed", "--study", "--out", tmp_path / "b") == 0
    rep = json.loads((tmp_path / "b" / "transfer.json").read_text())
    assert rep["mse_to_source"] > 0 and len(rep["study"]["ranking"]) == TINY["num_layers"]
    assert cli("transfer", "--config", cfg_file, "--out", tmp_path / "c") == 2


def test_retrain(tmp_path, cfg_file):
    ckpt = save_checkpoint(build_model(ModelConfig(**TINY)), tmp_path / "in.tvdt")
    assert cli("retrain", "--checkpoint", ckpt, "--steps", 0, "--out", tmp_path / "z") == 0
    assert (tmp_path / "z" / "model.tvdt").read_bytes() == ckpt.read_bytes()
    assert (tmp_path / "z" / "model_ema.tvdt").read_bytes() == ckpt.read_bytes()
    assert cli("retrain", "--config", cfg_file, "--train-steps", 6, "--batch-size", 2, "--layers", "1",
               "--reinit", "--out", tmp_path / "r") == 0
    lines = (tmp_path / "r" / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss" and len(lines) == 7


@pytest.mark.parametrize("cmd,extra", [
    ("generate", ["--capture", "layer=1"]),
    ("sweep-sparsity", ["--k", "0.2"]),
    ("retrain", ["--train-steps", "3", "--batch-size", "1"]),
])
def test_manifest_reproduces_directory(tmp_path, cfg_file, cmd, extra):
    assert cli(cmd, "--config", cfg_file, *extra, "--out", tmp_path / "a") == 0
    assert cli("reproduce", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b") == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_manifest_written_before_results(tmp_path, cfg_file):
    # a failing run still leaves its manifest behind
    assert cli("layer-sensitivity", "--config", cfg_file, "--k", "0.1,0.2", "--out", tmp_path / "o") == 2
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["manifest.json"]


def test_exit_codes(tmp_path, cfg_file, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"model": {"num_layers": 2,}}')
    assert cli("generate", "--config", bad, "--out", tmp_path / "x") == 2
    assert "bad.json:1:" in capsys.readouterr().err
    bad.write_text('{"model": {"num_layerz": 2}}')
    assert cli("generate", "--config", bad, "--out", tmp_path / "x") == 2
    assert "num_layerz" in capsys.readouterr().err
    assert cli("generate", "--config", tmp_path / "missing.json", "--out", tmp_path / "x") == 2
    assert cli("generate", "--bogus-flag") == 2
    assert cli("transfer", "--config", cfg_file, "--trace", tmp_path / "nope.atrc", "--target-seed", 1,
               "--out", tmp_path / "x") == 1
    assert cli("generate", "--config", cfg_file, "--checkpoint", bad, "--out", tmp_path / "y") == 2
