from __future__ import annotations

import csv
import filecmp
import json
import subprocess
import sys

import numpy as np
import pytest

from causalcredit.cli import main
from causalcredit.core import dataset_from_arrays, read_dataset, validate_dataset, write_dataset

TINY = ("train_steps = 20\nbatch_size = 32\nhidden = 8\neval_interval = 10\n"
        "policy_steps = 20\nmask_samples = 64\neval_episodes = 2\n")


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture
def gen_dir(tmp_path):
    out = tmp_path / "gen"
    assert run("gen", "--env", "LINEAR", "--agents", 2, "--tier", "medium", "--episodes", 6,
               "--seed", 1, "--state-dim", 3, "--actions", 3, "--sparsity", 0.5,
               "--out", out) == 0
    return out


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_gen_writes_three_valid_files(gen_dir):
    assert sorted(p.name for p in gen_dir.iterdir()) == ["dataset.jsonl", "hidden.jsonl",
                                                         "truth.json"]
    assert validate_dataset(read_dataset(gen_dir / "dataset.jsonl")) == []


def test_gen_is_byte_identical_across_runs(tmp_path, gen_dir):
    other = tmp_path / "again"
    run("gen", "--env", "LINEAR", "--agents", 2, "--tier", "medium", "--episodes", 6,
        "--seed", 1, "--state-dim", 3, "--actions", 3, "--sparsity", 0.5, "--out", other)
    for name in ("dataset.jsonl", "hidden.jsonl", "truth.json"):
        assert filecmp.cmp(gen_dir / name, other / name, shallow=False)


def test_usage_errors_exit_with_two(tmp_path, gen_dir):
    assert run("gen", "--agents", 0, "--out", tmp_path / "x") == 2
    assert run("gen", "--agents", 1, "--episodes", 2, "--out", gen_dir) == 2
    assert run("ablate", "--sweep", "graph", "--values", "XYZ", "--out", tmp_path / "y") == 2


def test_seed_environment_variable_overrides_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("MACCA_SEED", "42")
    out = tmp_path / "g"
    assert run("gen", "--agents", 1, "--episodes", 2, "--seed", 3, "--state-dim", 2,
               "--actions", 2, "--sparsity", 0.5, "--out", out) == 0
    assert read_dataset(out / "dataset.jsonl").seed == 42


def test_full_pipeline_produces_normalized_score(tmp_path, gen_dir, config, capsys):
    data = gen_dir / "dataset.jsonl"
    assert run("train-model", "--data", data, "--config", config, "--truth",
               gen_dir / "truth.json", "--hidden", gen_dir / "hidden.jsonl",
               "--out", tmp_path / "m") == 0
    echoed = capsys.readouterr().out
    assert "# resolved config" in echoed and "reward_lr = " in echoed
    assert {"model.json", "metrics.csv", "curves.png"} <= {p.name for p in (tmp_path / "m").iterdir()}
    assert run("assign", "--data", data, "--model", tmp_path / "m" / "model.json",
               "--out", tmp_path / "assigned.jsonl") == 0
    assert run("train-policy", "--data", tmp_path / "assigned.jsonl", "--mode", "individual",
               "--config", config, "--truth", gen_dir / "truth.json",
               "--out", tmp_path / "p") == 0
    assert run("train-policy", "--data", data, "--mode", "team", "--config", config,
               "--out", tmp_path / "pt") == 0
    report = tmp_path / "report.json"
    assert run("eval", "--policy", tmp_path / "p" / "policy.json", "--truth",
               gen_dir / "truth.json", "--episodes", 3, "--out", report) == 0
    rep = json.loads(report.read_text())
    assert rep["n_episodes"] == 3 and isinstance(rep["normalized_score"], float)


def test_dimension_mismatch_exits_with_three(tmp_path, gen_dir, config, capsys):
    other = tmp_path / "other"
    run("gen", "--agents", 2, "--episodes", 3, "--state-dim", 4, "--actions", 3,
        "--sparsity", 0.5, "--out", other)
    run("train-model", "--data", other / "dataset.jsonl", "--config", config,
        "--out", tmp_path / "m")
    capsys.readouterr()
    code = run("assign", "--data", gen_dir / "dataset.jsonl", "--model",
               tmp_path / "m" / "model.json", "--out", tmp_path / "a.jsonl")
    err = capsys.readouterr().err
    assert code == 3 and "(4, 4)" in err and "(3, 3)" in err
    assert run("oracle", "--data", gen_dir / "dataset.jsonl", "--truth",
               other / "truth.json") == 3


def test_numerical_failure_exits_with_four(tmp_path, config):
    n = 6
    ds = dataset_from_arrays(np.repeat([0, 1], 3), np.tile(np.arange(3), 2),
                             np.ones((n, 2)), np.zeros((n, 1), int), np.full(n, 1e300),
                             np.ones((n, 2)), np.tile([False, False, True], 2), (2,), (2,))
    write_dataset(ds, tmp_path / "bad.jsonl")
    assert run("train-model", "--data", tmp_path / "bad.jsonl", "--config", config,
               "--out", tmp_path / "m") == 4


def test_oracle_command_reports_masks(tmp_path, gen_dir, capsys):
    out = tmp_path / "oracle.json"
    assert run("oracle", "--data", gen_dir / "dataset.jsonl", "--truth", gen_dir / "truth.json",
               "--out", out) == 0
    rep = json.loads(out.read_text())
    truth = json.loads((gen_dir / "truth.json").read_text())["truth"]
    assert rep["masks"]["state"] == truth["state_masks"]


def test_ablate_writes_summary_per_value(tmp_path, config):
    out = tmp_path / "ab"
    assert run("ablate", "--sweep", "lambda1", "--values", "0,0.007,0.05,0.5", "--config", config,
               "--seeds", 2, "--agents", 2, "--episodes", 4, "--out", out) == 0
    with open(out / "summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    assert [r["value"] for r in summary] == ["0.0", "0.007", "0.05", "0.5"]
    assert "S_sr_mean" in summary[0] and "S_sr_std" in summary[0]
    assert (out / "ablation.png").stat().st_size > 0


def test_ablate_graph_variants(tmp_path, config):
    out = tmp_path / "g"
    assert run("ablate", "--sweep", "graph", "--values", "FCG,FG,DG", "--config", config,
               "--seeds", 1, "--agents", 2, "--episodes", 3, "--out", out) == 0
    with open(out / "summary.csv") as fh:
        assert [r["value"] for r in csv.DictReader(fh)] == ["FCG", "FG", "DG"]


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "causalcredit.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "train-model" in res.stdout
