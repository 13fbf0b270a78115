"""End-to-end tests of the command-line interface."""

import json
import shutil
import subprocess

import numpy as np
import pytest

from greenpatrol.allocation import load_allocations
from greenpatrol.cli import main
from greenpatrol.config import ExperimentConfig
from greenpatrol.harness import RunRecord, read_rows_csv

TINY = [
    "--set", "grid.width=5", "--set", "grid.height=5",
    "--set", "game.max_steps=10",
    "--set", "patrol.episodes=2", "--set", "patrol.learn_start=32",
    "--set", "patrol.drone_buffer=2000", "--set", "patrol.ranger_buffer=2000",
    "--set", "allocation.dataset_size=300",
    "--set", "allocation.autoencoder_epochs=2",
    "--set", "allocation.iters=2", "--set", "allocation.n_samples=3",
    "--set", "eval.episodes=3",
]


def test_gen_grid_stdout(capsys):
    assert main(["gen-grid", "--width", "4", "--height", "3", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    rows = out.strip().split("\n")
    assert len(rows) == 3
    assert all(len(row.split(",")) == 4 for row in rows)
    values = [float(v) for row in rows for v in row.split(",")]
    assert all(0.0 <= v <= 1.0 for v in values)


def test_gen_grid_file_deterministic(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    assert main(["gen-grid", "--seed", "3", "--out", str(a)]) == 0
    assert main(["gen-grid", "--seed", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(["gen-grid", "--seed", "4", "--out", str(b)]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_gen_dataset(tmp_path):
    out = tmp_path / "ds.bin"
    assert main(["gen-dataset", "--side", "attacker", "--count", "120",
                 "--out", str(out), *TINY]) == 0
    dataset = load_allocations(out)
    assert dataset.count == 120
    assert dataset.side == "attacker"
    assert (dataset.width, dataset.height) == (5, 5)


def test_full_workflow(tmp_path, capsys):
    patrol_dir = tmp_path / "patrol"
    assert main(["train-patrol", "--out-dir", str(patrol_dir), *TINY]) == 0
    for name in ("config.ini", "patrol_metrics.csv", "drone.ckpt",
                 "ranger.ckpt", "run.json"):
        assert (patrol_dir / name).exists()
    metrics = read_rows_csv(patrol_dir / "patrol_metrics.csv")
    assert len(metrics) == 2
    record = RunRecord.load(patrol_dir / "run.json")
    config = ExperimentConfig.from_file(patrol_dir / "config.ini")
    assert record.config_hash == config.config_hash()

    alloc_dir = tmp_path / "alloc"
    assert main(["train-alloc", "--algo", "combsgpo",
                 "--patrol-dir", str(patrol_dir),
                 "--out-dir", str(alloc_dir), *TINY]) == 0
    for name in ("alloc_curves.csv", "policy_defender.ckpt", "policy_attacker.ckpt",
                 "dataset_defender.bin", "dataset_attacker.bin",
                 "autoencoder_defender.ckpt", "autoencoder_attacker.ckpt",
                 "drone.ckpt", "ranger.ckpt", "config.ini", "run.json"):
        assert (alloc_dir / name).exists()
    assert len(read_rows_csv(alloc_dir / "alloc_curves.csv")) == 2
    # reused patrol weights travel into the allocation run directory
    assert (alloc_dir / "drone.ckpt").read_bytes() == (patrol_dir / "drone.ckpt").read_bytes()

    traces_dir = tmp_path / "traces"
    assert main(["evaluate", str(alloc_dir), "--traces-dir", str(traces_dir)]) == 0
    eval_rows = read_rows_csv(alloc_dir / "eval.csv")
    assert len(eval_rows) == 3
    traces = sorted(traces_dir.glob("episode_*.jsonl"))
    assert len(traces) == 3

    capsys.readouterr()
    assert main(["replay", str(traces[1])]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["length"] == int(eval_rows[1]["length"])
    assert summary["defender_return"] == float(eval_rows[1]["return"])

    # same seed, same report bytes
    out_b = tmp_path / "eval_b.csv"
    assert main(["evaluate", str(alloc_dir), "--out", str(out_b)]) == 0
    assert out_b.read_bytes() == (alloc_dir / "eval.csv").read_bytes()
    # a different seed changes the draw
    out_c = tmp_path / "eval_c.csv"
    assert main(["evaluate", str(alloc_dir), "--seed", "77",
                 "--out", str(out_c)]) == 0
    assert out_c.read_bytes() != out_b.read_bytes()

    assert main(["heatmap", str(alloc_dir), "--samples", "5"]) == 0
    counts = np.array([
        [int(v) for v in row.split(",")]
        for row in (alloc_dir / "heatmap.csv").read_text().strip().split("\n")
    ])
    assert counts.shape == (5, 5)
    assert counts.sum() > 0
    assert (alloc_dir / "heatmap.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_replay_rejects_tampered_trace(tmp_path, capsys):
    alloc_dir = tmp_path / "alloc"
    traces_dir = tmp_path / "traces"
    assert main(["train-alloc", "--algo", "random",
                 "--out-dir", str(alloc_dir), *TINY]) == 0
    assert main(["evaluate", str(alloc_dir), "--episodes", "1",
                 "--traces-dir", str(traces_dir)]) == 0
    trace = traces_dir / "episode_0000.jsonl"
    lines = trace.read_text().strip().split("\n")
    step = json.loads(lines[1])
    step["reward"] += 1.0
    lines[1] = json.dumps(step)
    trace.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert main(["replay", str(trace)]) == 2
    assert "error:" in capsys.readouterr().err


def test_random_baseline_run_dir(tmp_path):
    alloc_dir = tmp_path / "rand"
    assert main(["train-alloc", "--algo", "random",
                 "--out-dir", str(alloc_dir), *TINY]) == 0
    assert not (alloc_dir / "policy_defender.ckpt").exists()
    record = RunRecord.load(alloc_dir / "run.json")
    assert record.extras["algo"] == "random"
    assert main(["evaluate", str(alloc_dir), "--episodes", "2"]) == 0
    assert len(read_rows_csv(alloc_dir / "eval.csv")) == 2


def test_algo_comes_from_config_when_not_flagged(tmp_path):
    alloc_dir = tmp_path / "frompg"
    assert main(["train-alloc", "--set", "allocation.algo=pg",
                 "--out-dir", str(alloc_dir), *TINY]) == 0
    record = RunRecord.load(alloc_dir / "run.json")
    assert record.extras["algo"] == "pg"


def test_sweep_command(tmp_path, capsys):
    out_dir = tmp_path / "sweep"
    assert main(["sweep", "--levels", "0,0;1,1", "--out-dir", str(out_dir),
                 *TINY]) == 0
    rows = read_rows_csv(out_dir / "sweep.csv")
    assert [(row["beta"], row["kappa"]) for row in rows] == [
        ("0.0", "0.0"), ("1.0", "1.0"),
    ]
    assert rows[1]["detections"] == "0"
    assert (out_dir / "eval_b0_k0.csv").exists()
    assert (out_dir / "eval_b1_k1.csv").exists()
    assert len(read_rows_csv(out_dir / "eval_b0_k0.csv")) == 3


def test_timing_command(tmp_path):
    out = tmp_path / "timing.csv"
    assert main(["timing", "--algos", "pg", "--runs", "1", "--out", str(out),
                 *TINY]) == 0
    rows = read_rows_csv(out)
    assert len(rows) == 1
    assert rows[0]["algo"] == "pg"
    assert float(rows[0]["mean_seconds"]) > 0.0


def test_config_file_and_overrides(tmp_path):
    cfg_path = tmp_path / "exp.ini"
    base = ExperimentConfig.default(**{"grid.width": 5, "grid.height": 5, "run.seed": 6})
    base.to_file(cfg_path)
    out = tmp_path / "ds.bin"
    assert main(["gen-dataset", "--config", str(cfg_path), "--side", "defender",
                 "--count", "50", "--out", str(out)]) == 0
    dataset = load_allocations(out)
    assert dataset.seed == 6
    assert dataset.cells_per_record == 3  # two drones and one ranger
    # --set still applies on top of --config
    assert main(["gen-dataset", "--config", str(cfg_path), "--side", "defender",
                 "--count", "50", "--set", "run.seed=7", "--out", str(out)]) == 0
    assert load_allocations(out).seed == 7


def test_error_exit_codes(tmp_path, capsys):
    assert main(["gen-grid", "--width", "2", "--height", "2"]) == 2
    assert "error:" in capsys.readouterr().err
    assert main(["evaluate", str(tmp_path / "missing")]) == 2
    assert main(["replay", str(tmp_path / "missing.jsonl")]) == 2
    assert main(["gen-dataset", "--side", "attacker", "--out",
                 str(tmp_path / "x.bin"), "--set", "game.nope=1"]) == 2
    with pytest.raises(SystemExit):
        main(["train-alloc", "--algo", "dqn", "--out-dir", str(tmp_path)])
    with pytest.raises(SystemExit):
        main(["no-such-command"])


def test_console_script_entry_point(tmp_path):
    exe = shutil.which("greenpatrol")
    assert exe is not None, "console script not installed"
    out = tmp_path / "g.csv"
    proc = subprocess.run(
        [exe, "gen-grid", "--width", "4", "--height", "4", "--seed", "2",
         "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert out.exists()
