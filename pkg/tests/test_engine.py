from __future__ import annotations

import json
from dataclasses import replace

import pytest

from causal_evolve.archive import Archive, ProgramRecord, load_archive
from causal_evolve.engine import (
    ConfigError,
    EvolutionAborted,
    EvolveConfig,
    StepOutOfRange,
    best_after_children,
    replay_audit,
    report_at_steps,
    run_evolution,
)
from causal_evolve.gateway import Gateway
from causal_evolve.metrics import compute_metrics
from causal_evolve.scripted import synthesize_replay
from causal_evolve.tasks import CirclePacking

SMALL_SEED = [{"circles": [{"x": 0.5, "y": 0.5, "r": 0.1}]}]


def circle_reply(r):
    return {"tag": "mutate", "text": "```json\n" + json.dumps({"circles": [{"x": 0.5, "y": 0.5, "r": r}]}) + "\n```"}


def cfg(**kw):
    base = dict(task="circle_packing", budget=3, seed=0, seed_solutions=SMALL_SEED, cadence=100)
    base.update(kw)
    return EvolveConfig(**base)


def test_best_so_far_trace_from_scripted_scores(tmp_path):
    gw = Gateway.scripted([circle_reply(r) for r in (0.3, 0.5, 0.4)])
    report = run_evolution(cfg(), gw, output_dir=tmp_path)
    assert report.trace == [0.1, 0.3, 0.5, 0.5]
    assert report.best_so_far == 0.5 and report.iterations == 3


@pytest.mark.parametrize("bad", [dict(budget=0), dict(budget=5, report_steps=[3, 2]), dict(budget=5, report_steps=[6]),
                                 dict(task="tsp"), dict(mode="telepathy"), dict(parallelism=0), dict(tau=1.5)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        cfg(**bad)


def test_config_from_file_rejects_unknown_keys(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"task": "autocorr", "budget": 3, "temperature_k": 1}))
    with pytest.raises(ConfigError, match="temperature_k"):
        EvolveConfig.from_file(p)


def test_run_invariants(tmp_path):
    config = EvolveConfig(task="autocorr", budget=25, size=8, seed=3, cadence=5)
    gw = Gateway.scripted(synthesize_replay("autocorr", 25, seed=1, size=8))
    report = run_evolution(config, gw, output_dir=tmp_path)
    archive = load_archive(tmp_path / f"{report.run_id}.jsonl")
    assert len(archive) == 25 + 1
    assert sum(s["pulls"] for s in report.planner["stats"]) == 25
    for r in archive.records:
        assert (r.action_used is not None) == (r.source == "llm")
        assert r.valid or r.score == 0
    trace = archive.best_trace()
    assert all(a <= b for a, b in zip(trace, trace[1:]))
    assert replay_audit(archive) == []
    # annotation happens once, at creation
    assert gw.usage["requests"] >= sum(1 for r in archive.records if r.factor_flags)
    assert report.ledger["active_factors"] > 0
    snap = json.loads((tmp_path / "snapshot.json").read_text())
    assert set(snap) >= {"records", "planner", "ledger", "rng_state"}


def test_resume_runs_exactly_the_remaining_iterations(tmp_path):
    script = synthesize_replay("autocorr", 20, seed=2, size=6)
    first = run_evolution(EvolveConfig(task="autocorr", budget=7, size=6, cadence=3), Gateway.scripted(script),
                          output_dir=tmp_path)
    assert first.iterations == 7
    gw = Gateway.scripted(script)
    resumed = run_evolution(EvolveConfig(task="autocorr", budget=10, size=6, cadence=3), gw, output_dir=tmp_path,
                            resume_from=tmp_path / "snapshot.json")
    assert resumed.iterations == 10
    archive = load_archive(tmp_path / f"{resumed.run_id}.jsonl")
    assert len(archive) == 10 + 1
    assert gw.backend.remaining("mutate") == 20 - 3


def test_gateway_failure_aborts_with_resumable_snapshot(tmp_path):
    config = cfg(budget=5)
    replies = [circle_reply(r) for r in (0.2, 0.3)]
    with pytest.raises(EvolutionAborted) as exc:
        run_evolution(config, Gateway.scripted(replies), output_dir=tmp_path)
    assert exc.value.snapshot_path.exists()
    report = run_evolution(config, Gateway.scripted([circle_reply(r) for r in (0.4, 0.45, 0.35)]),
                           output_dir=tmp_path, resume_from=exc.value.snapshot_path)
    assert report.iterations == 5
    assert report.trace == [0.1, 0.2, 0.3, 0.4, 0.45, 0.45]


def test_unparseable_children_become_invalid_records(tmp_path):
    replies = [{"tag": "mutate", "text": "no fence here"}, circle_reply(0.3),
               {"tag": "mutate", "text": "```json\n{\"circles\": [{\"x\": 0.1, \"y\": 0.5, \"r\": 0.3}]}\n```"}]
    report = run_evolution(cfg(), Gateway.scripted(replies), output_dir=tmp_path)
    archive = load_archive(tmp_path / f"{report.run_id}.jsonl")
    bad, good, outside = archive.records[1:]
    assert not bad.valid and bad.payload is None and "no fenced block" in bad.violation
    assert good.valid and good.score == 0.3
    assert not outside.valid and outside.payload is not None and "left wall" in outside.violation


def test_circle_champion_is_rechecked_exactly(tmp_path):
    r = 0.2
    d = 2 * r - 5e-7
    tight = {"circles": [{"x": 0.3, "y": 0.5, "r": r}, {"x": 0.3 + d, "y": 0.5, "r": r}]}
    replies = [{"tag": "mutate", "text": "```json\n" + json.dumps(tight) + "\n```"}]
    report = run_evolution(cfg(budget=1), Gateway.scripted(replies), output_dir=tmp_path)
    assert report.best_so_far == pytest.approx(0.4)
    assert report.exact_champion["valid"] is False


def test_generator_mode(tmp_path):
    entries = synthesize_replay("circle_packing", 3, seed=5, size=4, mode="generator_program",
                                invalid_rate=0.0, malformed_rate=0.0)
    entries.insert(0, {"tag": "mutate", "text": "```python\nraise SystemExit(3)\n```"})
    config = EvolveConfig(task="circle_packing", budget=4, size=4, mode="generator_program", cadence=100)
    report = run_evolution(config, Gateway.scripted(entries), output_dir=tmp_path)
    archive = load_archive(tmp_path / f"{report.run_id}.jsonl")
    first, *rest = archive.records[1:]
    assert not first.valid and "exited with code 3" in first.violation and first.code
    assert all(r.valid and r.code for r in rest)


def test_parallel_run_commits_every_child(tmp_path):
    config = EvolveConfig(task="hadamard", budget=12, size=5, parallelism=3, cadence=4)
    report = run_evolution(config, Gateway.scripted(synthesize_replay("hadamard", 12, seed=0, size=5)),
                           output_dir=tmp_path)
    archive = load_archive(tmp_path / f"{report.run_id}.jsonl")
    assert len(archive) == 13 and report.iterations == 12
    assert [r.generation for r in archive.records] == list(range(13))


def test_report_steps_in_run_report(tmp_path):
    config = cfg(budget=3, report_steps=[1, 3])
    report = run_evolution(config, Gateway.scripted([circle_reply(r) for r in (0.3, 0.5, 0.4)]))
    assert report.step_table == [{"step": 1, "best_so_far": 0.3}, {"step": 3, "best_so_far": 0.5}]


# -- cross-seed reporting -----------------------------------------------------


def _run_log(run_id, scores):
    a = Archive(run_id=run_id, task="circle_packing")
    a.append(ProgramRecord("s", 0, None, "seed", 0.0, False))
    for i, s in enumerate(scores, start=1):
        payload = CirclePacking.from_tuples([(0.5, 0.5, s)])
        a.append(ProgramRecord(f"c{i}", i, payload, "llm", s, True, metrics=compute_metrics(payload).values))
    return a


def test_report_mean_and_best():
    runs = [_run_log("a", [0.1, 0.5]), _run_log("b", [0.7, 0.2]), _run_log("c", [0.6, 0.6])]
    table = report_at_steps(runs, [2])
    assert table.mean == [pytest.approx(0.6)] and table.best == [0.7]


def test_single_run_mean_equals_best():
    table = report_at_steps([_run_log("a", [0.1, 0.5, 0.3])], [1, 3])
    assert table.mean == table.best == [0.1, 0.5]


def test_step_beyond_run_names_it():
    with pytest.raises(StepOutOfRange, match="'short'"):
        report_at_steps([_run_log("long", [0.1] * 5), _run_log("short", [0.1] * 2)], [3])


def test_table_layout():
    text = report_at_steps([_run_log("a", [0.1, 0.5]), _run_log("b", [0.3, 0.4])], [1, 2]).format("CausalEvolve")
    head1, head2, row = text.splitlines()
    assert "Step 1 (s=1)" in head1 and "Step 2 (s=2)" in head1
    assert head2.split() == ["Mean", "Best", "Mean", "Best"]
    assert row.split() == ["CausalEvolve", "0.200", "0.300", "0.450", "0.500"]


def test_best_after_children_counts_seeds_at_step_zero():
    a = _run_log("a", [0.3])
    assert best_after_children(a) == [0.0, 0.3]


def test_replay_audit_flags_tampering():
    a = _run_log("a", [0.3, 0.4])
    tampered = Archive.from_records([a.records[0], a.records[1], replace(a.records[2], score=0.9)])
    assert replay_audit(a) == []
    mismatches = replay_audit(tampered)
    assert [(m.record_id, m.field, m.stored, m.recomputed) for m in mismatches] == [("c2", "score", 0.9, 0.4)]
