"""End-to-end CLI tests without mocks."""

import os
import subprocess
import sys
from pathlib import Path

import pytest

from massive_access.metrics import read_csv

REPO_ROOT = Path(__file__).resolve().parent.parent

TINY_CONFIG = """
# Four links, two subchannels.
scenario.num_cdevices = 2
scenario.num_d2d_pairs = 2
scenario.num_subchannels = 2
train.episodes = 2
train.steps_per_episode = 5
train.batch_size = 4
train.replay_capacity = 32
train.hidden_layers = [8]
transfer.group_size = 2
"""


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "massive_access.cli", *map(str, args)],
        capture_output=True,
        text=True,
        timeout=300,
        cwd=REPO_ROOT,
        env={**os.environ, "COLUMNS": "200"},
    )


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONFIG)
    return path


def test_train_then_evaluate(config, tmp_path):
    out = tmp_path / "run"
    result = run_cli("train", "-c", config, "-o", out)
    assert result.returncode == 0, f"CLI failed: {result.stderr}"
    assert "Training metrics saved" in result.stdout
    assert (out / "checkpoint.npz").exists()
    assert len(read_csv(out / "train.csv")) == 2

    result = run_cli(
        "evaluate", "-c", config, "-o", out, "--slots", 20, "--window", 10
    )
    assert result.returncode == 0, f"CLI failed: {result.stderr}"
    assert "Evaluation metrics saved" in result.stdout
    rows = read_csv(out / "eval.csv")
    assert [r["index"] for r in rows] == ["0", "1"]
    assert all(r["phase"] == "eval" for r in rows)
    assert (out / "events.csv").exists()


def test_evaluate_rejects_mismatched_checkpoint(config, tmp_path):
    out = tmp_path / "run"
    assert run_cli("train", "-c", config, "-o", out, "-e", 1).returncode == 0

    bigger = tmp_path / "bigger.conf"
    bigger.write_text(TINY_CONFIG + "scenario.num_cdevices = 3\n")
    result = run_cli("evaluate", "-c", bigger, "-o", out, "--slots", 5)
    assert result.returncode == 1
    assert "Error" in result.stdout


def test_bad_config_reports_error(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("scenario.num_cdevices = -1\n")
    result = run_cli("train", "-c", path, "-o", tmp_path / "run")
    assert result.returncode == 1
    assert "Error" in result.stdout


def test_sweep_then_figures(config, tmp_path):
    out = tmp_path / "sweep"
    result = run_cli(
        "sweep",
        "-c",
        config,
        "-o",
        out,
        "-a",
        "proposed",
        "-a",
        "fully_distributed",
        "-a",
        "random",
        "--seeds",
        "0,1",
        "--slots",
        20,
        "--window",
        10,
    )
    assert result.returncode == 0, f"CLI failed: {result.stderr}"
    assert "Experiment completed!" in result.stdout
    assert len(list((out / "cells").glob("*.csv"))) == 6
    assert (out / "runner_state.json").exists()

    result = run_cli("figure", "-o", out, "--figure", 4)
    assert result.returncode == 0, f"CLI failed: {result.stderr}"
    rows = read_csv(out / "figure4.csv")
    assert [r["episode"] for r in rows] == ["0.0", "1.0"]
    assert set(rows[0]) == {
        "episode",
        "proposed_ee",
        "fully_distributed_ee",
        "random_ee",
    }

    result = run_cli("figure", "-o", out, "--figure", 5)
    assert result.returncode == 1
    assert "Error" in result.stdout


def test_sweep_with_values(config, tmp_path):
    out = tmp_path / "latency"
    result = run_cli(
        "sweep",
        "-c",
        config,
        "-o",
        out,
        "-a",
        "random",
        "--sweep",
        "latency",
        "--values",
        "2,5",
        "--slots",
        10,
        "--window",
        10,
    )
    assert result.returncode == 0, f"CLI failed: {result.stderr}"
    rows = [r for r in read_csv(out / "aggregate.csv") if r["phase"] == "eval"]
    assert sorted(float(r["value"]) for r in rows) == [2.0, 5.0]
