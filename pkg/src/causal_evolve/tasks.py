"""Solution payloads and deterministic evaluators for the three search tasks.

Every evaluator is a pure function of its payload. Scores are oriented so that
larger is better for all tasks; an invalid solution scores exactly 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Sequence, Union

import numpy as np

HADAMARD = "hadamard"
AUTOCORR = "autocorr"
CIRCLE_PACKING = "circle_packing"
TASKS = (HADAMARD, AUTOCORR, CIRCLE_PACKING)

# Default instance sizes used by the engine.
DEFAULT_SIZES = {HADAMARD: 29, AUTOCORR: 256, CIRCLE_PACKING: 26}

# Best-known |det| for a 29x29 +-1 matrix, used as the score normalizer.
HADAMARD_29_BEST_DET = 2**28 * 7**12 * 320

RELAXED_SLACK = 1e-6
LOG10_DET_SENTINEL = -999.0


class SolutionError(ValueError):
    """Base class for payloads that cannot be parsed or evaluated."""


class SchemaError(SolutionError):
    pass


class DomainError(SolutionError):
    pass


class DegenerateInputError(SolutionError):
    pass


@dataclass(frozen=True)
class HadamardMatrix:
    n: int
    entries: tuple[tuple[int, ...], ...]

    task = HADAMARD

    def __post_init__(self):
        if len(self.entries) != self.n or any(len(row) != self.n for row in self.entries):
            raise SchemaError(f"dimension mismatch: expected {self.n}x{self.n} entries")
        for row in self.entries:
            for v in row:
                if v not in (-1, 1) or isinstance(v, bool):
                    raise DomainError(f"entry not in {{-1,+1}}: {v!r}")

    def to_json(self) -> dict:
        return {"task": HADAMARD, "n": self.n, "entries": [list(r) for r in self.entries]}

    @classmethod
    def from_rows(cls, rows) -> "HadamardMatrix":
        rows = [tuple(int(v) for v in r) for r in np.asarray(rows).tolist()]
        return cls(len(rows), tuple(rows))


@dataclass(frozen=True)
class StepFunction:
    n: int
    values: tuple[float, ...]

    task = AUTOCORR

    def __post_init__(self):
        if len(self.values) != self.n:
            raise SchemaError(f"dimension mismatch: n={self.n} but {len(self.values)} values")
        if self.n < 1:
            raise SchemaError("step function needs n >= 1")
        for v in self.values:
            if not math.isfinite(v):
                raise DomainError(f"non-finite value {v!r}")
            if v < 0:
                raise DomainError(f"negative value {v!r}")
        if not any(v > 0 for v in self.values):
            raise DegenerateInputError("step function is identically zero")

    def to_json(self) -> dict:
        return {"task": AUTOCORR, "n": self.n, "values": list(self.values)}

    @classmethod
    def from_values(cls, values) -> "StepFunction":
        vals = tuple(float(v) for v in values)
        return cls(len(vals), vals)


@dataclass(frozen=True)
class Circle:
    x: float
    y: float
    r: float


@dataclass(frozen=True)
class CirclePacking:
    circles: tuple[Circle, ...]

    task = CIRCLE_PACKING

    def __post_init__(self):
        for c in self.circles:
            if not all(math.isfinite(v) for v in (c.x, c.y, c.r)):
                raise DomainError(f"non-finite circle {c}")
            if c.r < 0:
                raise DomainError(f"negative radius {c.r!r}")

    @property
    def n_circles(self) -> int:
        return len(self.circles)

    def to_json(self) -> dict:
        return {
            "task": CIRCLE_PACKING,
            "circles": [{"x": c.x, "y": c.y, "r": c.r} for c in self.circles],
        }

    @classmethod
    def from_tuples(cls, triples) -> "CirclePacking":
        return cls(tuple(Circle(float(x), float(y), float(r)) for x, y, r in triples))

    def as_array(self) -> np.ndarray:
        return np.array([(c.x, c.y, c.r) for c in self.circles], dtype=float).reshape(-1, 3)


SolutionPayload = Union[HadamardMatrix, StepFunction, CirclePacking]


@dataclass
class Evaluation:
    score: float
    valid: bool
    detail: dict[str, float] = field(default_factory=dict)
    violation: str | None = None

    def to_json(self) -> dict:
        return {
            "score": self.score,
            "valid": self.valid,
            "detail": dict(self.detail),
            "violation": self.violation,
        }


# ---------------------------------------------------------------------------
# parsing


def _require(obj: dict, key: str, kind):
    if key not in obj:
        raise SchemaError(f"missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise SchemaError(f"field {key!r} has wrong type {type(value).__name__}")
    return value


def payload_from_json(task_id: str, obj: Any) -> SolutionPayload:
    """Build a validated payload from an already-decoded JSON object."""
    if task_id not in TASKS:
        raise SchemaError(f"unknown task {task_id!r}")
    if not isinstance(obj, dict):
        raise SchemaError("solution must be a JSON object")
    tag = obj.get("task", task_id)
    if tag != task_id:
        raise SchemaError(f"payload is tagged {tag!r}, expected {task_id!r}")

    if task_id == HADAMARD:
        n = _require(obj, "n", int)
        rows = _require(obj, "entries", list)
        parsed = []
        for row in rows:
            if not isinstance(row, list):
                raise SchemaError("entries must be a list of rows")
            for v in row:
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise SchemaError(f"entry has wrong type: {v!r}")
                if v not in (-1, 1):
                    raise DomainError(f"entry not in {{-1,+1}}: {v!r}")
            parsed.append(tuple(int(v) for v in row))
        return HadamardMatrix(n, tuple(parsed))

    if task_id == AUTOCORR:
        n = _require(obj, "n", int)
        values = _require(obj, "values", list)
        for v in values:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise SchemaError(f"value has wrong type: {v!r}")
        return StepFunction(n, tuple(float(v) for v in values))

    circles = _require(obj, "circles", list)
    parsed_circles = []
    for i, c in enumerate(circles):
        if not isinstance(c, dict):
            raise SchemaError(f"circle {i} must be an object")
        vals = []
        for key in ("x", "y", "r"):
            v = _require(c, key, (int, float))
            vals.append(float(v))
        parsed_circles.append(Circle(*vals))
    return CirclePacking(tuple(parsed_circles))


def parse_solution(task_id: str, data: bytes | str) -> SolutionPayload:
    """Decode UTF-8 JSON into a validated payload for ``task_id``."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError(f"solution is not UTF-8: {exc}") from exc
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    return payload_from_json(task_id, obj)


def payload_task(payload: SolutionPayload) -> str:
    return payload.task


# ---------------------------------------------------------------------------
# hadamard


def exact_determinant(rows: Sequence[Sequence[int]]) -> int:
    """Fraction-free Bareiss elimination over Python integers."""
    a = [list(map(int, r)) for r in rows]
    n = len(a)
    if any(len(r) != n for r in a):
        raise SchemaError("matrix is not square")
    if n == 0:
        return 1
    sign = 1
    prev = 1
    for k in range(n - 1):
        if a[k][k] == 0:
            for i in range(k + 1, n):
                if a[i][k] != 0:
                    a[k], a[i] = a[i], a[k]
                    sign = -sign
                    break
            else:
                return 0
        pivot = a[k][k]
        row_k = a[k]
        for i in range(k + 1, n):
            row_i = a[i]
            aik = row_i[k]
            for j in range(k + 1, n):
                # exact division is guaranteed by Sylvester's identity
                row_i[j] = (row_i[j] * pivot - aik * row_k[j]) // prev
            row_i[k] = 0
        prev = pivot
    return sign * a[n - 1][n - 1]


def log10_abs(value: int) -> float:
    value = abs(value)
    if value == 0:
        return LOG10_DET_SENTINEL
    return math.log10(value)


def hadamard_score(abs_det: int, n: int, normalizer: int | None = None) -> float:
    """|det| divided by the best-known value for n=29, else by ``normalizer``."""
    if normalizer is None:
        normalizer = HADAMARD_29_BEST_DET if n == 29 else 1
    return float(Fraction(abs(abs_det), normalizer))


def evaluate_hadamard(matrix: HadamardMatrix, normalizer: int | None = None) -> Evaluation:
    det = exact_determinant(matrix.entries)
    score = hadamard_score(abs(det), matrix.n, normalizer)
    return Evaluation(
        score=score,
        valid=True,
        detail={"log10_abs_det": log10_abs(det), "n": float(matrix.n)},
    )


# ---------------------------------------------------------------------------
# second autocorrelation ratio


def autoconvolution_nodes(values: Sequence[float]) -> np.ndarray:
    """Node values of f*f at t_j = -2 + j*h for j = 0..2n (zero at both ends)."""
    f = np.asarray(values, dtype=float)
    n = f.size
    h = 2.0 / n
    g = np.zeros(2 * n + 1)
    g[1:-1] = h * np.convolve(f, f)
    return g


def autocorr_norms(values: Sequence[float]) -> tuple[float, float, float]:
    """Return (||g||_2^2, ||g||_1, ||g||_inf) of the piecewise-linear g = f*f."""
    g = autoconvolution_nodes(values)
    h = 2.0 / ((g.size - 1) // 2)
    a, b = g[:-1], g[1:]
    l2_sq = float(np.sum(h * (a * a + a * b + b * b) / 3.0))
    l1 = float(np.sum(h * (a + b) / 2.0))
    linf = float(g.max())
    return l2_sq, l1, linf


def evaluate_autocorr(stepfn: StepFunction) -> Evaluation:
    """Score is R(f); the norms in ``detail`` are those of f / max f."""
    f = np.asarray(stepfn.values, dtype=float)
    if f.size < 1:
        raise DegenerateInputError("empty step function")
    if np.any(f < 0):
        raise DomainError("negative value in step function")
    if not np.any(f > 0):
        raise DegenerateInputError("step function is identically zero")
    # R is scale invariant; normalizing by the peak keeps tiny or huge inputs in range
    l2_sq, l1, linf = autocorr_norms(f / f.max())
    ratio = l2_sq / (l1 * linf)
    return Evaluation(
        score=ratio,
        valid=True,
        detail={"ratio": ratio, "l2_squared": l2_sq, "l1": l1, "linf": linf},
    )


# ---------------------------------------------------------------------------
# circle packing


def circle_constraint_gaps(arr: np.ndarray) -> list[tuple[str, float]]:
    """Constraint slack values in a fixed order: containment per circle, then pairs i<j."""
    gaps: list[tuple[str, float]] = []
    for i, (x, y, r) in enumerate(arr):
        gaps.append((f"circle {i} left wall", float(x - r)))
        gaps.append((f"circle {i} right wall", float(1.0 - x - r)))
        gaps.append((f"circle {i} bottom wall", float(y - r)))
        gaps.append((f"circle {i} top wall", float(1.0 - y - r)))
    n = len(arr)
    for i in range(n):
        for j in range(i + 1, n):
            dist = math.hypot(arr[i, 0] - arr[j, 0], arr[i, 1] - arr[j, 1])
            gaps.append((f"circles {i} and {j} overlap", float(dist - (arr[i, 2] + arr[j, 2]))))
    return gaps


def evaluate_circles(packing: CirclePacking, mode: str = "exact") -> Evaluation:
    if mode not in ("exact", "relaxed"):
        raise ValueError(f"unknown verification mode {mode!r}")
    arr = packing.as_array()
    if np.any(arr[:, 2] < 0):
        raise DomainError("negative radius")
    slack = 0.0 if mode == "exact" else RELAXED_SLACK
    gaps = circle_constraint_gaps(arr)
    sum_radii = math.fsum(arr[:, 2].tolist())
    min_gap = min((g for _, g in gaps), default=0.0)
    violation = None
    for name, gap in gaps:
        if gap < -slack:
            violation = f"{name} (gap {gap:.3e})"
            break
    valid = violation is None
    return Evaluation(
        score=sum_radii if valid else 0.0,
        valid=valid,
        detail={"sum_radii": sum_radii, "min_gap": min_gap},
        violation=violation,
    )


def evaluate(payload: SolutionPayload, mode: str = "exact", normalizer: int | None = None) -> Evaluation:
    """Dispatch to the task evaluator; ``mode`` only matters for circle packing."""
    if isinstance(payload, HadamardMatrix):
        return evaluate_hadamard(payload, normalizer)
    if isinstance(payload, StepFunction):
        return evaluate_autocorr(payload)
    if isinstance(payload, CirclePacking):
        return evaluate_circles(payload, mode)
    raise TypeError(f"not a solution payload: {type(payload).__name__}")


# ---------------------------------------------------------------------------
# seeds


def seed_solution(task_id: str, size: int | None = None) -> SolutionPayload:
    """A trivial valid starting point with a strictly positive score."""
    size = size or DEFAULT_SIZES[task_id]
    if task_id == HADAMARD:
        # 2I - J: +1 on the diagonal, -1 elsewhere; |det| = 2^(n-1) |n-2|
        rows = [[1 if i == j else -1 for j in range(size)] for i in range(size)]
        if size == 2:
            rows = [[1, 1], [1, -1]]
        return HadamardMatrix.from_rows(rows)
    if task_id == AUTOCORR:
        return StepFunction.from_values([1.0] * size)
    if task_id == CIRCLE_PACKING:
        return CirclePacking((Circle(0.5, 0.5, 0.5),))
    raise SchemaError(f"unknown task {task_id!r}")


def check_size(payload: SolutionPayload, size: int) -> str | None:
    """Return a violation message if ``payload`` does not fit the task instance."""
    if isinstance(payload, HadamardMatrix) and payload.n != size:
        return f"expected a {size}x{size} matrix, got n={payload.n}"
    if isinstance(payload, StepFunction) and payload.n != size:
        return f"expected n={size} steps, got n={payload.n}"
    if isinstance(payload, CirclePacking) and payload.n_circles > size:
        return f"expected at most {size} circles, got {payload.n_circles}"
    return None
