import json
import subprocess
import sys

import numpy as np
import pytest

from bnet.cli import run
from bnet.train import TrainConfig, read_metrics

TINY = {"depths": [1, 1, 1], "base_width": 8, "synth_size": 8, "synth_patch": 4, "batch_size": 16,
        "synth_n_train": 32, "synth_n_test": 16, "epochs": 2, "norm": "bnet3"}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def test_count_resnet50(capsys):
    assert run(["count", "--arch", "resnet50", "--norm", "bnet3", "--input", "224"]) == 0
    out = capsys.readouterr().out
    assert "params 25.7 M" in out and "GFLOPs 4.14" in out


def test_count_writes_files(tmp_path, capsys):
    assert run(["count", "--arch", "mini", "--norm", "bnconv", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "cost.csv").read_text().startswith("layer,")
    assert "dwconv" in (tmp_path / "cost.txt").read_text()


def test_gradcheck_passes(capsys):
    assert run(["gradcheck", "--arch", "mini", "--norm", "bnet3", "--dtype", "f64"]) == 0
    err = float(capsys.readouterr().out.split()[-1])
    assert err <= 1e-6


@pytest.mark.parametrize("argv", [
    ["train", "--config", "missing.json"],
    ["train", "--bogus"],
    ["frobnicate"],
    [],
    ["count", "--norm", "ln"],
    ["gradcheck", "--dtype", "f32"],
    ["eval"],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 1
    assert "usage error" in capsys.readouterr().err


def test_runtime_error_exits_2(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"lr0": -1}')
    assert run(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2
    assert "lr0" in capsys.readouterr().err


def test_train_eval_heatmap(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["train", "--config", str(config), "--out", str(out), "--emit-curves"]) == 0
    rows = read_metrics(out / "metrics.csv")
    assert len(rows) == 4 and (out / "curves.csv").is_file()
    assert TrainConfig.from_json(out / "config.json").norm == "bnet3"
    capsys.readouterr()

    assert run(["eval", "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "loss,top1"
    loss, top1 = map(float, lines[1].split(","))
    assert (loss, top1) == (rows[-1]["loss"], rows[-1]["top1"])

    assert run(["heatmap", "--out", str(out), "--layer", "stage1.block1.normC"]) == 0
    grid = np.loadtxt(out / "heatmap.csv", delimiter=",")
    assert grid.shape == (8, 8) and grid.min() >= 0 and grid.max() <= 32  # 4 x base width channels
    assert (out / "heatmap.pgm").read_text().startswith("P2")
    assert run(["heatmap", "--out", str(out), "--layer", "stage1.block1.normA"]) == 2


def test_synth_data(tmp_path, config, capsys):
    assert run(["synth-data", "--config", str(config), "--out", str(tmp_path)]) == 0
    z = np.load(tmp_path / "synthetic.npz")
    assert z["x_train"].shape == (32, 3, 8, 8) and np.load(tmp_path / "image.npy").shape == (3, 8, 8)


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "bnet", "count", "--arch", "resnet18"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "params 11.7 M" in proc.stdout
