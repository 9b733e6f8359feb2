"""Append-only history of evaluated programs with ranking, sampling and persistence."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .tasks import SolutionPayload, payload_from_json

SOURCES = ("llm", "seed", "direct")


class ArchiveError(RuntimeError):
    pass


class SequencingError(ArchiveError):
    pass


class IntegrityError(ArchiveError):
    pass


class EmptyArchiveError(ArchiveError):
    pass


class MetricLookupError(KeyError):
    pass


class ArchiveParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True, order=True)
class PlannerAction:
    metric: str
    direction: int

    def __post_init__(self):
        if self.direction not in (1, -1):
            raise ValueError(f"direction must be +1 or -1, got {self.direction!r}")

    def to_json(self) -> dict:
        return {"metric": self.metric, "direction": self.direction}

    @classmethod
    def from_json(cls, obj: dict) -> "PlannerAction":
        return cls(obj["metric"], int(obj["direction"]))

    def __str__(self) -> str:
        return f"({self.metric},{'+1' if self.direction > 0 else '-1'})"


@dataclass(frozen=True)
class ProgramRecord:
    id: str
    generation: int
    payload: SolutionPayload | None
    source: str
    score: float
    valid: bool
    parent_id: str | None = None
    metrics: dict[str, float] = field(default_factory=dict)
    factor_flags: dict[str, bool] = field(default_factory=dict)
    action_used: PlannerAction | None = None
    wall_time_ms: int = 0
    violation: str | None = None
    code: str | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "parent_id": self.parent_id,
            "generation": self.generation,
            "payload": self.payload.to_json() if self.payload is not None else None,
            "source": self.source,
            "score": self.score,
            "valid": self.valid,
            "metrics": dict(self.metrics),
            "factor_flags": dict(self.factor_flags),
            "action_used": self.action_used.to_json() if self.action_used else None,
            "wall_time_ms": self.wall_time_ms,
            "violation": self.violation,
            "code": self.code,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ProgramRecord":
        payload = obj.get("payload")
        if payload is not None:
            payload = payload_from_json(payload["task"], payload)
        action = obj.get("action_used")
        return cls(
            id=obj["id"],
            parent_id=obj.get("parent_id"),
            generation=int(obj["generation"]),
            payload=payload,
            source=obj["source"],
            score=float(obj["score"]),
            valid=bool(obj["valid"]),
            metrics={k: float(v) for k, v in obj.get("metrics", {}).items()},
            factor_flags={k: bool(v) for k, v in obj.get("factor_flags", {}).items()},
            action_used=PlannerAction.from_json(action) if action else None,
            wall_time_ms=int(obj.get("wall_time_ms", 0)),
            violation=obj.get("violation"),
            code=obj.get("code"),
        )


def dumps_record(record: ProgramRecord) -> str:
    return json.dumps(record.to_json(), allow_nan=False, separators=(",", ":"))


class Archive:
    """The run history. Appends go through one lock; readers see a consistent prefix."""

    def __init__(self, run_id: str = "run", task: str | None = None, log_path: str | Path | None = None):
        self.run_id = run_id
        self.task = task
        self.records: list[ProgramRecord] = []
        self.best_so_far = 0.0
        self._ids: set[str] = set()
        self._lock = threading.Lock()
        self.log_path = Path(log_path) if log_path else None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(list(self.records))

    def get(self, record_id: str) -> ProgramRecord:
        for r in self.records:
            if r.id == record_id:
                return r
        raise KeyError(record_id)

    def append(self, record: ProgramRecord) -> str:
        with self._lock:
            if record.generation != len(self.records):
                raise SequencingError(
                    f"record generation {record.generation} != archive length {len(self.records)}"
                )
            if record.id in self._ids:
                raise IntegrityError(f"duplicate record id {record.id!r}")
            if record.parent_id is not None and record.parent_id not in self._ids:
                raise IntegrityError(f"parent {record.parent_id!r} is not an earlier record")
            if record.source not in SOURCES:
                raise IntegrityError(f"unknown source {record.source!r}")
            if not record.valid and record.score != 0.0:
                record = replace(record, score=0.0)
            if self.log_path is not None:
                with open(self.log_path, "a", encoding="utf-8") as fh:
                    fh.write(dumps_record(record) + "\n")
            self.records.append(record)
            self._ids.add(record.id)
            if record.valid and record.score > self.best_so_far:
                self.best_so_far = record.score
            return record.id

    def valid_records(self) -> list[ProgramRecord]:
        return [r for r in self.records if r.valid]

    def rank_by_metric(self, metric: str, direction: int) -> list[str]:
        """Valid record ids sorted by metric*direction descending (ties: score desc, id asc)."""
        valid = self.valid_records()
        for r in valid:
            if metric not in r.metrics:
                raise MetricLookupError(f"metric {metric!r} missing from record {r.id!r}")
        ordered = sorted(valid, key=lambda r: (-(r.metrics[metric] * direction), -r.score, r.id))
        return [r.id for r in ordered]

    def ranked_by_score(self) -> list[ProgramRecord]:
        return sorted(self.valid_records(), key=lambda r: (-r.score, r.id))

    def parent_probabilities(self) -> tuple[list[ProgramRecord], np.ndarray]:
        ranked = self.ranked_by_score()
        if not ranked:
            raise EmptyArchiveError("no valid record to sample a parent from")
        weights = 1.0 / np.arange(1, len(ranked) + 1)
        return ranked, weights / weights.sum()

    def sample_parent(self, rng: np.random.Generator) -> ProgramRecord:
        ranked, probs = self.parent_probabilities()
        return ranked[int(rng.choice(len(ranked), p=probs))]

    def best(self) -> ProgramRecord | None:
        ranked = self.ranked_by_score()
        return ranked[0] if ranked else None

    def best_trace(self) -> list[float]:
        trace, best = [], 0.0
        for r in self.records:
            if r.valid and r.score > best:
                best = r.score
            trace.append(best)
        return trace

    def snapshot_json(self, **extra: Any) -> dict:
        doc = {
            "run_id": self.run_id,
            "task": self.task,
            "best_so_far": self.best_so_far,
            "records": [r.to_json() for r in self.records],
        }
        doc.update(extra)
        return doc

    def save_snapshot(self, path: str | Path, **extra: Any) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.snapshot_json(**extra), allow_nan=False), encoding="utf-8")
        tmp.replace(path)

    @classmethod
    def from_records(cls, records: Iterable[ProgramRecord], run_id: str = "run", task: str | None = None) -> "Archive":
        archive = cls(run_id=run_id, task=task)
        for r in records:
            archive.append(r)
        if archive.task is None:
            archive.task = _infer_task(archive.records)
        return archive


def _infer_task(records: list[ProgramRecord]) -> str | None:
    for r in records:
        if r.payload is not None:
            return r.payload.task
    return None


def load_snapshot(path: str | Path) -> tuple[Archive, dict]:
    """Load a snapshot document; returns the archive and the full decoded document."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    records = [ProgramRecord.from_json(r) for r in doc.get("records", [])]
    archive = Archive.from_records(records, run_id=doc.get("run_id", "run"), task=doc.get("task"))
    return archive, doc


def load_archive(path: str | Path) -> Archive:
    """Load a JSONL run log (or a snapshot document) into an :class:`Archive`."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, dict) and "records" in doc:
        return load_snapshot(path)[0]
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(ProgramRecord.from_json(obj))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ArchiveParseError(lineno, f"malformed record: {exc}") from exc
    return Archive.from_records(records, run_id=path.stem)
