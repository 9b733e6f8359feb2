"""Synthetic replay scripts for the scripted gateway backend.

The generated responses mix valid children, children that fail verification
and unparseable replies, plus factor proposals, annotations and hypotheses, so
an offline run exercises every branch of the evolution loop.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tasks import AUTOCORR, CIRCLE_PACKING, DEFAULT_SIZES, HADAMARD

FACTOR_POOL = (
    ("symmetric_layout", "The construction is symmetric under reflection."),
    ("uses_local_search", "The solution was refined by a local search or hill-climbing pass."),
    ("block_structure", "The construction is assembled from repeated blocks."),
    ("boundary_heavy", "Most of the mass or area sits near the boundary."),
    ("randomized_start", "The construction starts from a random initial state."),
    ("greedy_placement", "Elements are placed one at a time by a greedy rule."),
    ("sparse_support", "Many components are exactly zero or absent."),
    ("algebraic_seed", "The construction starts from an algebraic or number-theoretic pattern."),
)


def _hadamard(rng: np.random.Generator, n: int) -> dict:
    base = np.where(np.eye(n, dtype=bool), 1, -1)
    flips = rng.random((n, n)) < rng.uniform(0.05, 0.5)
    return {"task": HADAMARD, "n": n, "entries": np.where(flips, -base, base).tolist()}


def _autocorr(rng: np.random.Generator, n: int) -> dict:
    values = rng.exponential(size=n) * (rng.random(n) > rng.uniform(0.0, 0.6))
    if not values.any():
        values[rng.integers(n)] = 1.0
    return {"task": AUTOCORR, "n": n, "values": [round(float(v), 6) for v in values]}


def _circles(rng: np.random.Generator, n: int, overlap: bool = False) -> dict:
    """Circles in distinct cells of a grid; ``overlap`` pushes two of them into each other."""
    g = int(np.ceil(np.sqrt(n)))
    cell = 1.0 / g
    k = int(rng.integers(1, n + 1))
    cells = rng.permutation(g * g)[:k]
    circles = []
    for c in cells:
        i, j = divmod(int(c), g)
        r = cell / 2 * rng.uniform(0.5, 1.0)
        circles.append({"x": (i + 0.5) * cell, "y": (j + 0.5) * cell, "r": r})
    if overlap:
        first = circles[0]
        circles.append({"x": first["x"], "y": first["y"], "r": first["r"] / 2})
    return {"task": CIRCLE_PACKING, "circles": circles}


def _child_payload(task: str, size: int, rng: np.random.Generator, broken: bool) -> dict:
    if task == HADAMARD:
        return _hadamard(rng, size + 1 if broken else size)
    if task == AUTOCORR:
        return _autocorr(rng, size - 1 if broken and size > 1 else size)
    return _circles(rng, size, overlap=broken)


def _fence(body: str, lang: str) -> str:
    return f"```{lang}\n{body}\n```"


def mutate_text(task: str, size: int, rng: np.random.Generator, mode: str = "direct_payload",
                invalid_rate: float = 0.15, malformed_rate: float = 0.1) -> str:
    u = rng.random()
    if u < malformed_rate:
        return "I could not come up with an improvement this time." if rng.random() < 0.5 else (
            _fence("{}", "json") + "\nand an alternative:\n" + _fence("{}", "json")
        )
    payload = _child_payload(task, size, rng, broken=u < malformed_rate + invalid_rate)
    body = json.dumps(payload)
    if mode == "generator_program":
        program = f"import json\nprint(json.dumps({body}))"
        return "Candidate program:\n" + _fence(program, "python")
    return "Proposed child:\n" + _fence(body, "json")


def synthesize_replay(
    task: str,
    n_children: int,
    seed: int = 0,
    size: int | None = None,
    mode: str = "direct_payload",
    invalid_rate: float = 0.15,
    malformed_rate: float = 0.1,
) -> list[dict]:
    """Enough scripted responses of every tag for a run of ``n_children`` children."""
    size = size or DEFAULT_SIZES[task]
    rng = np.random.default_rng(seed)
    entries = []
    for _ in range(n_children):
        entries.append({"tag": "mutate", "text": mutate_text(task, size, rng, mode, invalid_rate, malformed_rate)})
    names = [n for n, _ in FACTOR_POOL]
    for _ in range(n_children):
        flags = {n: bool(rng.random() < 0.5) for n in names}
        entries.append({"tag": "annotate", "text": json.dumps(flags)})
    for i in range(n_children + 1):
        picks = [FACTOR_POOL[(2 * i + k) % len(FACTOR_POOL)] for k in range(2)]
        entries.append(
            {"tag": "propose_factors", "text": json.dumps([{"name": n, "description": d} for n, d in picks])}
        )
    for i in range(n_children + 1):
        if i % 4 == 3:
            text = "The shift probably reflects a change in which parents were sampled."
        else:
            n, d = FACTOR_POOL[(5 * i + 1) % len(FACTOR_POOL)]
            text = json.dumps(
                {
                    "hypothesis": f"The effect of the flagged factor depends on whether {n} also holds.",
                    "new_factors": [{"name": n, "description": d}],
                }
            )
        entries.append({"tag": "abduce", "text": text})
    return entries


def write_replay(path: str | Path, entries: list[dict]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")
    return path
