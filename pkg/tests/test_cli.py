from __future__ import annotations

import csv
import io
import json

import pytest

from causal_evolve.cli import run_command
from causal_evolve.scripted import synthesize_replay, write_replay

ONE_CIRCLE = {"circles": [{"x": 0.5, "y": 0.5, "r": 0.5}]}


@pytest.fixture
def one_circle(tmp_path):
    p = tmp_path / "one.json"
    p.write_text(json.dumps(ONE_CIRCLE))
    return p


def test_evaluate_prints_json(one_circle, capsys):
    assert run_command(["evaluate", "--task", "circle_packing", "--solution", str(one_circle)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["score"] == 0.5 and out["valid"] is True


def test_metrics_output_is_json(one_circle, capsys):
    assert run_command(["metrics", "--task", "circle_packing", "--solution", str(one_circle)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["task"] == "circle_packing" and out["metrics"]["density_score"] == pytest.approx(3.141592653589793 / 4)


def test_missing_file_is_usage_error(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert run_command(["evaluate", "--task", "hadamard", "--solution", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_malformed_solution_is_runtime_failure(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert run_command(["evaluate", "--task", "autocorr", "--solution", str(p)]) == 1
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["frobnicate"], [], ["evaluate", "--task", "tsp", "--solution", "x"]])
def test_bad_invocations_exit_2(argv, capsys):
    assert run_command(argv) == 2


def test_theory_etc_noiseless(capsys):
    assert run_command(["theory-etc", "--d", "2", "--K", "3", "--sigma", "0", "--trials", "10"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert rows[0]["policy"] == "etc" and float(rows[0]["success_rate"]) == 1.0
    # ETC spends 2 evaluations, fewer than one per program, so no uniform row
    assert len(rows) == 1
    assert run_command(["theory-etc", "--d", "2", "--K", "3", "--trials", "10"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["policy"] for r in rows] == ["etc", "blackbox_uniform"] and rows[0]["budget"] == rows[1]["budget"]


def test_theory_barrier(capsys):
    assert run_command(["theory-barrier", "--delta-margin", "0.4", "--budget", "6", "--trials", "20"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["policy"] for r in rows] == ["uniform", "greedy", "random", "posterior_greedy"]


def _write_config(tmp_path, seed, budget=6):
    write_replay(tmp_path / f"replay{seed}.jsonl", synthesize_replay("autocorr", budget, seed=seed, size=6))
    cfg = {"task": "autocorr", "budget": budget, "size": 6, "seed": seed, "cadence": 3,
           "gateway": {"backend": "scripted", "replay": f"replay{seed}.jsonl"}}
    path = tmp_path / f"config{seed}.json"
    path.write_text(json.dumps(cfg))
    return path


def test_evolve_replay_and_report(tmp_path, capsys):
    logs = []
    for seed in (0, 1):
        assert run_command(["evolve", "--config", str(_write_config(tmp_path, seed))]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["iterations"] == 6
        logs.append(tmp_path / "runs" / report["run_id"] / f"{report['run_id']}.jsonl")

    assert run_command(["replay", "--archive", str(logs[0])]) == 0
    assert json.loads(capsys.readouterr().out) == {"records": 7, "mismatches": []}

    assert run_command(["report", "--runs", *map(str, logs), "--steps", "3", "6", "--label", "demo"]) == 0
    captured = capsys.readouterr()
    table = json.loads(captured.out)
    assert [r["step"] for r in table["rows"]] == [3, 6]
    assert all(r["mean"] <= r["best"] for r in table["rows"])
    assert "demo" in captured.err

    assert run_command(["report", "--runs", str(logs[0]), "--steps", "7"]) == 1


def test_evolve_without_gateway_is_usage_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"task": "autocorr", "budget": 2}))
    assert run_command(["evolve", "--config", str(p)]) == 2


def test_evolve_aborts_when_script_runs_out(tmp_path, capsys):
    path = _write_config(tmp_path, 4, budget=3)
    cfg = json.loads(path.read_text())
    cfg["budget"] = 8
    path.write_text(json.dumps(cfg))
    assert run_command(["evolve", "--config", str(path)]) == 1
    assert "resume from" in capsys.readouterr().err
