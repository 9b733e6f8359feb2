"""The evolution loop.

Each iteration picks a planner action, samples a parent, gathers inspirations
ranked by the action's metric, asks the model for a child, evaluates it and
commits the result. Every ``cadence`` children the factor ledger is refreshed:
effects are re-estimated, surprises are sent for abduction and new factors are
proposed from a high/low score contrast.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .archive import Archive, PlannerAction, ProgramRecord, dumps_record, load_snapshot
from .gateway import (
    ChildParseError,
    Gateway,
    GatewayError,
    ScriptedBackend,
    annotate_factors,
    assemble_mutation_prompt,
    parse_child,
    propose_procedure_factors,
    request_abduction,
)
from .ledger import FactorLedger, scratchpad_digest
from .metrics import compute_metrics
from .planner import PlannerState, select_inspirations
from .sandbox import ExecutionError, execute_candidate
from .tasks import (
    CIRCLE_PACKING,
    DEFAULT_SIZES,
    CirclePacking,
    TASKS,
    SolutionError,
    check_size,
    evaluate,
    parse_solution,
    payload_from_json,
    seed_solution,
)

logger = logging.getLogger(__name__)

MODES = ("direct_payload", "generator_program")


class ConfigError(ValueError):
    pass


class EvolutionAborted(RuntimeError):
    def __init__(self, message: str, snapshot_path: Path | None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


class StepOutOfRange(ValueError):
    pass


@dataclass
class EvolveConfig:
    task: str
    budget: int
    seed: int = 0
    tau: float = 0.95
    block_len: int = 10
    inspirations_k: int = 2
    min_support: int = 3
    cadence: int = 10
    theta_sig: float = 0.25  # multiple of the score standard deviation
    theta_shift: float = 1.0
    max_active: int = 12
    max_new_factors: int = 3
    contrast_k: int = 3
    digest_top_k: int = 5
    parallelism: int = 1
    mode: str = "direct_payload"
    size: int | None = None
    temperature: float = 0.7
    time_limit_ms: int = 60_000
    memory_hint: int | None = None
    timing: str = "auto"  # "wall", "off", or "auto" (off for scripted backends)
    seed_solutions: list = field(default_factory=list)
    report_steps: list = field(default_factory=list)
    run_id: str | None = None
    output_dir: str | None = None
    gateway: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def task_size(self) -> int:
        return self.size or DEFAULT_SIZES[self.task]

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if not isinstance(self.budget, int) or self.budget < 1:
            raise ConfigError(f"budget must be a positive integer, got {self.budget!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.cadence < 1 or self.inspirations_k < 1 or self.block_len < 1:
            raise ConfigError("cadence, inspirations_k and block_len must be >= 1")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if self.theta_sig <= 0 or self.theta_shift <= 0:
            raise ConfigError("theta_sig and theta_shift must be positive")
        if self.timing not in ("auto", "wall", "off"):
            raise ConfigError(f"unknown timing mode {self.timing!r}")
        steps = list(self.report_steps)
        if steps != sorted(steps) or any(s < 1 or s > self.budget for s in steps):
            raise ConfigError("report_steps must be ascending and within [1, budget]")

    @classmethod
    def from_dict(cls, obj: dict) -> "EvolveConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path: str | Path) -> "EvolveConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class RunReport:
    run_id: str
    task: str
    seed: int
    budget: int
    iterations: int
    best_so_far: float
    best_record_id: str | None
    trace: list[float]
    step_table: list[dict]
    planner: dict
    ledger: dict
    usage: dict
    wall_time_ms: int
    exact_champion: dict | None = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class _Job:
    action: PlannerAction
    parent_id: str
    request: object


@dataclass
class _Outcome:
    payload: object = None
    code: str | None = None
    score: float = 0.0
    valid: bool = False
    metrics: dict = field(default_factory=dict)
    violation: str | None = None
    wall_time_ms: int = 0


def evaluation_mode(task: str) -> str:
    """Circle packings are scored with the relaxed verifier during evolution."""
    return "relaxed" if task == CIRCLE_PACKING else "exact"


def child_count(archive: Archive) -> int:
    return sum(1 for r in archive.records if r.source == "llm")


def best_after_children(archive: Archive) -> list[float]:
    """best_so_far after 0, 1, 2, ... model-generated children (seeds count towards step 0)."""
    out, best, seen_child = [], 0.0, False
    for r in archive.records:
        if r.source == "llm" and not seen_child:
            out.append(best)
            seen_child = True
        if r.valid and r.score > best:
            best = r.score
        if r.source == "llm":
            out.append(best)
    if not seen_child:
        out.append(best)
    return out


class Evolution:
    """Mutable state of one run; :func:`run_evolution` is the usual entry point."""

    def __init__(self, config: EvolveConfig, gateway: Gateway, output_dir: str | Path | None = None):
        self.config = config
        self.gateway = gateway
        out = output_dir or config.output_dir
        self.output_dir = Path(out) if out else None
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        self.run_id = config.run_id or f"{config.task}-seed{config.seed}"
        self.rng = np.random.default_rng(config.seed)
        self.archive = Archive(run_id=self.run_id, task=config.task, log_path=self._path(f"{self.run_id}.jsonl"))
        self.planner = PlannerState.for_task(config.task, tau=config.tau, block_len=config.block_len)
        self.ledger = FactorLedger(min_support=config.min_support, max_active=config.max_active)
        self.eval_mode = evaluation_mode(config.task)
        timing = config.timing
        if timing == "auto":
            timing = "off" if isinstance(gateway.backend, ScriptedBackend) else "wall"
        self.record_timing = timing == "wall"
        self.elapsed_ms = 0

    def _path(self, name: str) -> Path | None:
        return self.output_dir / name if self.output_dir is not None else None

    # -- setup ---------------------------------------------------------------

    def start_fresh(self) -> None:
        if self.archive.log_path is not None:
            self.archive.log_path.write_text("", encoding="utf-8")
        seeds = [(payload_from_json(self.config.task, obj), "direct") for obj in self.config.seed_solutions]
        if not seeds:
            seeds = [(seed_solution(self.config.task, self.config.task_size), "seed")]
        for payload, source in seeds:
            outcome = self._score_payload(payload)
            gen = len(self.archive)
            self.archive.append(
                ProgramRecord(
                    id=f"g{gen:05d}",
                    generation=gen,
                    payload=payload,
                    source=source,
                    score=outcome.score,
                    valid=outcome.valid,
                    metrics=outcome.metrics,
                    violation=outcome.violation,
                )
            )
        if not self.archive.valid_records():
            raise ConfigError("no valid seed solution")

    def restore(self, snapshot_path: str | Path) -> None:
        archive, doc = load_snapshot(snapshot_path)
        if archive.task != self.config.task:
            raise ConfigError(f"snapshot task {archive.task!r} does not match config {self.config.task!r}")
        self.run_id = archive.run_id
        log_path = self._path(f"{self.run_id}.jsonl")
        if log_path is not None:
            log_path.write_text("".join(dumps_record(r) + "\n" for r in archive.records), encoding="utf-8")
        archive.log_path = log_path
        self.archive = archive
        self.planner = PlannerState.from_json(doc["planner"])
        self.ledger = FactorLedger.from_json(doc["ledger"])
        self.rng.bit_generator.state = doc["rng_state"]
        self.elapsed_ms = int(doc.get("elapsed_ms", 0))

    # -- evaluation ----------------------------------------------------------

    def _score_payload(self, payload) -> _Outcome:
        violation = check_size(payload, self.config.task_size)
        if violation:
            return _Outcome(payload=payload, violation=violation)
        try:
            ev = evaluate(payload, mode=self.eval_mode)
        except SolutionError as exc:
            return _Outcome(payload=payload, violation=str(exc))
        metrics = compute_metrics(payload).values if ev.valid else {}
        return _Outcome(payload=payload, score=ev.score, valid=ev.valid, metrics=metrics, violation=ev.violation)

    def _run_program(self, code: str) -> _Outcome:
        with tempfile.TemporaryDirectory(prefix="program-") as tmp:
            path = os.path.join(tmp, "candidate.py")
            Path(path).write_text(code, encoding="utf-8")
            try:
                result = execute_candidate(
                    [sys.executable, path], self.config.time_limit_ms, self.config.memory_hint
                )
            except ExecutionError as exc:
                detail = f"{exc}: {exc.stderr.strip()[-500:]}" if exc.stderr else str(exc)
                return _Outcome(code=code, violation=detail)
        try:
            payload = parse_solution(self.config.task, result.stdout)
        except SolutionError as exc:
            return _Outcome(code=code, violation=f"program output rejected: {exc}")
        outcome = self._score_payload(payload)
        outcome.code = code
        return outcome

    # -- iteration -----------------------------------------------------------

    def _prepare(self) -> _Job:
        cfg = self.config
        action = self.planner.select_action(self.rng)
        parent = self.archive.sample_parent(self.rng)
        inspiration_ids = select_inspirations(self.archive, action, cfg.inspirations_k, parent.id)
        inspirations = [self.archive.get(i) for i in inspiration_ids]
        digest = scratchpad_digest(self.ledger, cfg.digest_top_k)
        request = assemble_mutation_prompt(
            cfg.task, parent, inspirations, digest, cfg.task_size, cfg.mode, action, cfg.temperature
        )
        return _Job(action, parent.id, request)

    def _execute(self, job: _Job) -> _Outcome:
        start = time.monotonic()
        response = self.gateway.complete(job.request)
        try:
            parsed = parse_child(response.text, self.config.task, self.config.mode)
        except ChildParseError as exc:
            outcome = _Outcome(violation=f"unparseable response: {exc}")
        else:
            if parsed.code is not None:
                outcome = self._run_program(parsed.code)
            else:
                outcome = self._score_payload(parsed.payload)
        if self.record_timing:
            outcome.wall_time_ms = int((time.monotonic() - start) * 1000)
        return outcome

    def _commit(self, job: _Job, outcome: _Outcome) -> ProgramRecord:
        gen = len(self.archive)
        record = ProgramRecord(
            id=f"g{gen:05d}",
            generation=gen,
            parent_id=job.parent_id,
            payload=outcome.payload,
            source="llm",
            score=outcome.score if outcome.valid else 0.0,
            valid=outcome.valid,
            metrics=outcome.metrics,
            action_used=job.action,
            wall_time_ms=outcome.wall_time_ms,
            violation=outcome.violation,
            code=outcome.code,
        )
        active = self.ledger.active_factors()
        if active and (record.payload is not None or record.code):
            record = replace(record, factor_flags=annotate_factors(self.gateway, record, active))
        best_before = self.archive.best_so_far
        self.archive.append(record)
        self.planner.update_reward(job.action, record.score, best_before)
        if child_count(self.archive) % self.config.cadence == 0:
            self._refresh_ledger()
        return record

    def _refresh_ledger(self) -> None:
        cfg = self.config
        gen = len(self.archive) - 1
        self.ledger.reestimate(self.archive.records, gen, cfg.theta_sig, cfg.theta_shift)
        pending = self.ledger.open_events()
        if pending:
            digest = scratchpad_digest(self.ledger, cfg.digest_top_k)
            hypothesis = request_abduction(self.gateway, digest, pending, generation=gen)
            if hypothesis is not None:
                self.ledger.record_hypothesis(hypothesis, gen)
        ranked = self.archive.ranked_by_score()
        if len(ranked) >= 2:
            k = min(cfg.contrast_k, len(ranked) // 2)
            proposals = propose_procedure_factors(
                self.gateway, ranked[:k], ranked[-k:], cfg.max_new_factors, self.ledger.active_factors()
            )
            if proposals:
                self.ledger.register_factors(proposals, origin="llm_proposed", generation=gen)
        self.save_snapshot()

    # -- persistence ---------------------------------------------------------

    def snapshot_doc(self) -> dict:
        return self.archive.snapshot_json(
            planner=self.planner.to_json(),
            ledger=self.ledger.to_json(),
            rng_state=self.rng.bit_generator.state,
            children=child_count(self.archive),
            elapsed_ms=self.elapsed_ms,
        )

    def save_snapshot(self) -> Path | None:
        path = self._path("snapshot.json")
        if path is not None:
            self.archive.save_snapshot(
                path,
                planner=self.planner.to_json(),
                ledger=self.ledger.to_json(),
                rng_state=self.rng.bit_generator.state,
                children=child_count(self.archive),
                elapsed_ms=self.elapsed_ms if self.record_timing else 0,
            )
        return path

    # -- main loop -----------------------------------------------------------

    def run(self) -> RunReport:
        cfg = self.config
        remaining = cfg.budget - child_count(self.archive)
        start = time.monotonic()
        try:
            if cfg.parallelism == 1:
                for _ in range(remaining):
                    job = self._prepare()
                    self._commit(job, self._execute(job))
            else:
                self._run_parallel(remaining)
        except GatewayError as exc:
            path = self.save_snapshot()
            raise EvolutionAborted(f"gateway failure: {exc}", path) from exc
        if self.record_timing:
            self.elapsed_ms += int((time.monotonic() - start) * 1000)
        self.save_snapshot()
        report = self.report()
        if self.output_dir is not None:
            (self.output_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
        return report

    def _run_parallel(self, remaining: int) -> None:
        in_flight: dict[Future, _Job] = {}
        submitted = 0
        with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
            while submitted < remaining or in_flight:
                while submitted < remaining and len(in_flight) < self.config.parallelism:
                    job = self._prepare()
                    in_flight[pool.submit(self._execute, job)] = job
                    submitted += 1
                done, _ = wait(in_flight, return_when=FIRST_COMPLETED)
                for fut in done:
                    job = in_flight.pop(fut)
                    try:
                        outcome = fut.result()
                    except GatewayError:
                        for other in in_flight:
                            other.cancel()
                        raise
                    self._commit(job, outcome)

    def report(self) -> RunReport:
        cfg = self.config
        trace = best_after_children(self.archive)
        table = [{"step": s, "best_so_far": trace[s]} for s in cfg.report_steps if s < len(trace)]
        best = self.archive.best()
        exact = None
        if cfg.task == CIRCLE_PACKING and best is not None and best.payload is not None:
            ev = evaluate(best.payload, mode="exact")
            exact = {"record_id": best.id, "score": ev.score, "valid": ev.valid, "violation": ev.violation}
        return RunReport(
            run_id=self.run_id,
            task=cfg.task,
            seed=cfg.seed,
            budget=cfg.budget,
            iterations=child_count(self.archive),
            best_so_far=self.archive.best_so_far,
            best_record_id=best.id if best else None,
            trace=trace,
            step_table=table,
            planner=self.planner.to_json(),
            ledger=ledger_summary(self.ledger),
            usage=dict(self.gateway.usage),
            wall_time_ms=self.elapsed_ms,
            exact_champion=exact,
        )


def ledger_summary(ledger: FactorLedger) -> dict:
    active = ledger.active_factors()
    return {
        "active_factors": len(active),
        "retired_factors": len(ledger.factors) - len(active),
        "surprises": len(ledger.surprises),
        "open_surprises": len(ledger.open_surprises),
        "hypotheses": len(ledger.hypotheses),
        "estimates": {
            name: est.ate for name, est in sorted(ledger.estimates.items()) if ledger.factors[name].status == "active"
        },
    }


def run_evolution(
    config: EvolveConfig,
    gateway: Gateway,
    output_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> RunReport:
    evo = Evolution(config, gateway, output_dir)
    if resume_from is not None:
        evo.restore(resume_from)
    else:
        evo.start_fresh()
    return evo.run()


# ---------------------------------------------------------------------------
# reporting across seeds


@dataclass
class StepTable:
    steps: list[int]
    mean: list[float]
    best: list[float]

    def format(self, label: str = "", digits: int = 3) -> str:
        width = digits + 5
        head1 = [f"{'':<12}"] + [f"{f'Step {i} (s={s})':^{2 * width + 1}}" for i, s in enumerate(self.steps, 1)]
        head2 = [f"{'':<12}"] + [f"{'Mean':>{width}} {'Best':>{width}}" for _ in self.steps]
        row = [f"{label:<12}"] + [
            f"{m:>{width}.{digits}f} {b:>{width}.{digits}f}" for m, b in zip(self.mean, self.best)
        ]
        return "\n".join(" ".join(line).rstrip() for line in (head1, head2, row))

    def to_json(self) -> dict:
        return {
            "rows": [{"step": s, "mean": m, "best": b} for s, m, b in zip(self.steps, self.mean, self.best)]
        }


def report_at_steps(run_logs: Sequence[Archive], steps: Sequence[int]) -> StepTable:
    """Mean and max over runs of best_so_far after ``s`` children, for each step ``s``."""
    if not run_logs:
        raise ValueError("need at least one run log")
    traces = []
    for archive in run_logs:
        trace = best_after_children(archive)
        last = len(trace) - 1
        for s in steps:
            if s > last:
                raise StepOutOfRange(f"run {archive.run_id!r} has only {last} children, cannot report step {s}")
        traces.append(trace)
    means, bests = [], []
    for s in steps:
        vals = [t[s] for t in traces]
        means.append(sum(vals) / len(vals))
        bests.append(max(vals))
    return StepTable(list(steps), means, bests)


# ---------------------------------------------------------------------------
# integrity audit


@dataclass
class Mismatch:
    record_id: str
    field: str
    stored: object
    recomputed: object


def infer_task_size(archive: Archive) -> int | None:
    """Instance size implied by the valid records of a log (matrix order, steps or circle count)."""
    sizes = []
    for r in archive.valid_records():
        p = r.payload
        sizes.append(p.n_circles if isinstance(p, CirclePacking) else p.n)
    return max(sizes) if sizes else None


def replay_audit(archive: Archive, size: int | None = None) -> list[Mismatch]:
    """Recompute score, validity and metrics of every record from its payload."""
    mode = evaluation_mode(archive.task) if archive.task else "exact"
    size = size or infer_task_size(archive)
    mismatches = []
    for r in archive.records:
        expected = (0.0, False, {})
        if r.payload is not None and not (size and check_size(r.payload, size)):
            ev = evaluate(r.payload, mode=mode)
            metrics = compute_metrics(r.payload).values if ev.valid else {}
            expected = (ev.score, ev.valid, metrics)
        for name, stored, recomputed in zip(
            ("score", "valid", "metrics"), (r.score, r.valid, r.metrics), expected
        ):
            if stored != recomputed:
                mismatches.append(Mismatch(r.id, name, stored, recomputed))
    return mismatches
