"""Language-model transport and prompt handling.

Two interchangeable backends sit behind :class:`Gateway`: a live chat-completion
endpoint reached over HTTPS, and a scripted backend that replays recorded
responses per request tag. Live traffic can be written to a transcript in the
replay format so a run can be re-driven offline.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import httpx

from .archive import ProgramRecord
from .ledger import Hypothesis, ProcedureFactor, SurpriseEvent
from .tasks import AUTOCORR, CIRCLE_PACKING, HADAMARD, SolutionError, SolutionPayload, payload_from_json

logger = logging.getLogger(__name__)

TAGS = ("mutate", "propose_factors", "annotate", "abduce", "summarize")
API_KEY_ENV = "CAUSAL_EVOLVE_API_KEY"
DEFAULT_MAX_RESPONSE_CHARS = 1_000_000


class GatewayError(RuntimeError):
    """Hard transport failure; aborts the run."""


class ScriptExhausted(GatewayError):
    pass


class ResponseTooLarge(GatewayError):
    pass


class ChildParseError(ValueError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    system: str
    user: str
    tag: str
    temperature: float = 0.7
    max_tokens: int = 4096

    def __post_init__(self):
        if not self.system or not self.user:
            raise ValueError("system and user prompts must be non-empty")
        if self.tag not in TAGS:
            raise ValueError(f"unknown request tag {self.tag!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    backend: str
    usage: dict[str, int] = field(default_factory=lambda: {"prompt_tokens": 0, "completion_tokens": 0})


# ---------------------------------------------------------------------------
# backends


class ScriptedBackend:
    """Replays ``{tag, text}`` entries in file order, independently per tag."""

    name = "scripted"

    def __init__(self, entries: Sequence[dict]):
        self._queues: dict[str, list[str]] = {t: [] for t in TAGS}
        for e in entries:
            if e["tag"] not in self._queues:
                raise ValueError(f"unknown tag {e['tag']!r} in replay script")
            self._queues[e["tag"]].append(e["text"])
        self._pos = {t: 0 for t in TAGS}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    try:
                        entries.append(json.loads(line))
                    except json.JSONDecodeError as exc:
                        raise ValueError(f"{path}:{lineno}: bad replay entry: {exc}") from exc
        return cls(entries)

    def remaining(self, tag: str) -> int:
        return len(self._queues[tag]) - self._pos[tag]

    def send(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            queue, pos = self._queues[request.tag], self._pos[request.tag]
            if pos >= len(queue):
                raise ScriptExhausted(f"replay script has no more {request.tag!r} responses")
            self._pos[request.tag] = pos + 1
            return ChatResponse(text=queue[pos], backend=self.name)


class LiveBackend:
    """Chat-completion style endpoint: POST {model, messages, temperature, max_tokens}."""

    name = "live"

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        max_retries: int = 4,
        backoff_s: float = 1.0,
        timeout_s: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._sleep = sleep
        self._client = httpx.Client(timeout=timeout_s, transport=transport)
        self.attempt_log: list[int | str] = []

    def _body(self, request: ChatRequest) -> dict:
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def send(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error = "no attempt made"
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff_s * 2 ** (attempt - 1))
            try:
                resp = self._client.post(self.endpoint, json=self._body(request), headers=headers)
            except httpx.TransportError as exc:
                self.attempt_log.append(type(exc).__name__)
                last_error = f"transport error: {exc}"
                continue
            self.attempt_log.append(resp.status_code)
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            try:
                data = resp.json()
                text = data["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise GatewayError(f"malformed completion body: {exc}") from exc
            usage = data.get("usage") or {}
            return ChatResponse(
                text=text,
                backend=self.name,
                usage={
                    "prompt_tokens": int(usage.get("prompt_tokens", 0)),
                    "completion_tokens": int(usage.get("completion_tokens", 0)),
                },
            )
        raise GatewayError(f"giving up after {self.max_retries + 1} attempts: {last_error}")


class Gateway:
    def __init__(
        self,
        backend,
        transcript_path: str | Path | None = None,
        max_in_flight: int = 4,
        max_response_chars: int = DEFAULT_MAX_RESPONSE_CHARS,
    ):
        self.backend = backend
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self.max_response_chars = max_response_chars
        self._slots = threading.BoundedSemaphore(max(1, max_in_flight))
        self._log_lock = threading.Lock()
        self.usage = {"prompt_tokens": 0, "completion_tokens": 0, "requests": 0}

    @classmethod
    def scripted(cls, source: str | Path | Sequence[dict], **kwargs) -> "Gateway":
        if isinstance(source, (str, Path)):
            backend = ScriptedBackend.from_file(source)
        else:
            backend = ScriptedBackend(source)
        return cls(backend, max_in_flight=1, **kwargs)

    @classmethod
    def from_config(cls, cfg: dict, base_dir: str | Path = ".") -> "Gateway":
        kind = cfg.get("backend", "scripted")
        base = Path(base_dir)
        transcript = cfg.get("transcript")
        if transcript:
            transcript = base / transcript
        if kind == "scripted":
            return cls.scripted(base / cfg["replay"], transcript_path=transcript)
        if kind == "live":
            backend = LiveBackend(
                endpoint=cfg["endpoint"],
                model=cfg["model"],
                api_key=os.environ.get(cfg.get("api_key_env", API_KEY_ENV)),
                max_retries=int(cfg.get("max_retries", 4)),
                backoff_s=float(cfg.get("backoff_s", 1.0)),
                timeout_s=float(cfg.get("timeout_s", 120.0)),
            )
            return cls(backend, transcript_path=transcript, max_in_flight=int(cfg.get("max_in_flight", 4)))
        raise ValueError(f"unknown gateway backend {kind!r}")

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._slots:
            response = self.backend.send(request)
        if len(response.text) > self.max_response_chars:
            raise ResponseTooLarge(f"response of {len(response.text)} chars exceeds limit")
        with self._log_lock:
            self.usage["requests"] += 1
            for k in ("prompt_tokens", "completion_tokens"):
                self.usage[k] += response.usage.get(k, 0)
            if self.transcript_path is not None:
                with open(self.transcript_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"tag": request.tag, "text": response.text}) + "\n")
        return response


# ---------------------------------------------------------------------------
# prompt templates

TASK_DESCRIPTIONS = {
    HADAMARD: (
        "Construct an n x n matrix H with every entry equal to +1 or -1 (n = {size}) that "
        "maximizes |det(H)|. The score is |det(H)| divided by 2^28 * 7^12 * 320, the best "
        "known value for n = 29."
    ),
    AUTOCORR: (
        "Find a nonnegative step function f on [-1, 1] with n = {size} equal-width steps that "
        "maximizes R(f) = ||f*f||_2^2 / (||f*f||_1 * ||f*f||_inf), where f*f is the linear "
        "autoconvolution (computed exactly as a piecewise-linear function)."
    ),
    CIRCLE_PACKING: (
        "Place at most {size} circles inside the unit square [0,1]^2 so that no two circles "
        "overlap and every circle lies fully inside the square, maximizing the sum of radii."
    ),
}

OUTPUT_SCHEMAS = {
    HADAMARD: '{"task": "hadamard", "n": <int>, "entries": [[+1 or -1, ...], ...]}',
    AUTOCORR: '{"task": "autocorr", "n": <int>, "values": [<nonnegative real>, ...]}',
    CIRCLE_PACKING: '{"task": "circle_packing", "circles": [{"x": <real>, "y": <real>, "r": <real>}, ...]}',
}

MUTATE_DIRECT_INSTRUCTIONS = (
    "Reply with exactly one fenced ```json block containing the improved solution in this "
    "format:\n{schema}\nDo not include any other fenced block."
)
MUTATE_PROGRAM_INSTRUCTIONS = (
    "Reply with exactly one fenced ```python block: a self-contained program that prints the "
    "solution as JSON to stdout in this format:\n{schema}\nDo not include any other fenced block."
)

PROPOSE_SYSTEM = (
    "You study how candidate solutions were constructed and name boolean properties of their "
    "construction procedure that explain score differences."
)
ANNOTATE_SYSTEM = (
    "You label a candidate solution with boolean properties of its construction procedure. "
    "Reply with a single JSON object mapping each property name to true or false."
)
ABDUCE_SYSTEM = (
    "Estimated effects of construction properties on the score have shifted unexpectedly. "
    "Propose an explanation and, if useful, new properties (possible confounders) to track. "
    'Reply with JSON: {"hypothesis": "<text>", "new_factors": [{"name": ..., "description": ...}]}'
)


def task_system_prompt(task: str, size: int, mode: str = "direct_payload") -> str:
    template = MUTATE_PROGRAM_INSTRUCTIONS if mode == "generator_program" else MUTATE_DIRECT_INSTRUCTIONS
    return TASK_DESCRIPTIONS[task].format(size=size) + "\n\n" + template.format(schema=OUTPUT_SCHEMAS[task])


def _describe(record: ProgramRecord, heading: str) -> list[str]:
    lines = [f"### {heading} (id {record.id}, score {record.score:.10g})"]
    if record.metrics:
        metrics = ", ".join(f"{k}={v:.6g}" for k, v in record.metrics.items())
        lines.append(f"Metrics: {metrics}")
    if record.code:
        lines += ["```python", record.code.rstrip(), "```"]
    elif record.payload is not None:
        lines += ["```json", json.dumps(record.payload.to_json(), separators=(",", ":")), "```"]
    return lines


def assemble_mutation_prompt(
    task: str,
    parent: ProgramRecord,
    inspirations: Sequence[ProgramRecord],
    digest: str,
    size: int,
    mode: str = "direct_payload",
    action=None,
    temperature: float = 0.7,
) -> ChatRequest:
    user = ["Improve the parent solution below."]
    user += _describe(parent, "Parent")
    if inspirations:
        if action is not None:
            direction = "high" if action.direction > 0 else "low"
            user.append(f"\nInspirations, chosen for {direction} {action.metric}:")
        else:
            user.append("\nInspirations:")
        for i, rec in enumerate(inspirations, start=1):
            user += _describe(rec, f"Inspiration {i}")
    if digest:
        user += ["", digest]
    return ChatRequest(
        system=task_system_prompt(task, size, mode),
        user="\n".join(user),
        tag="mutate",
        temperature=temperature,
    )


# ---------------------------------------------------------------------------
# response parsing

_FENCE = re.compile(r"```([A-Za-z0-9_+-]*)[ \t]*\n(.*?)```", re.DOTALL)


def fenced_blocks(text: str) -> list[tuple[str, str]]:
    return [(lang.lower(), body) for lang, body in _FENCE.findall(text)]


@dataclass
class ParsedChild:
    payload: SolutionPayload | None = None
    code: str | None = None


def parse_child(text: str, task: str, mode: str = "direct_payload") -> ParsedChild:
    """Extract the single fenced block of a mutation response."""
    blocks = fenced_blocks(text)
    if not blocks:
        raise ChildParseError("no fenced block in response")
    if len(blocks) > 1:
        raise ChildParseError(f"ambiguous response: {len(blocks)} fenced blocks")
    _, body = blocks[0]
    if mode == "generator_program":
        if not body.strip():
            raise ChildParseError("empty program")
        return ParsedChild(code=body)
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ChildParseError(f"fenced block is not JSON: {exc}") from exc
    try:
        return ParsedChild(payload=payload_from_json(task, obj))
    except SolutionError as exc:
        raise ChildParseError(f"schema violation: {exc}") from exc


def _loads_lenient(text: str) -> Any:
    """JSON from the whole reply, or from its single fenced block."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    blocks = fenced_blocks(text)
    if len(blocks) == 1:
        return json.loads(blocks[0][1])
    raise json.JSONDecodeError("no JSON found", text, 0)


def _factor_dicts(items: Any) -> list[dict]:
    out = []
    if not isinstance(items, list):
        raise ValueError("expected a list of factors")
    for item in items:
        if not isinstance(item, dict):
            continue
        name = str(item.get("name", "")).strip()
        desc = str(item.get("description", "")).strip()
        if name and desc:
            out.append({"name": name, "description": desc})
    return out


def _record_lines(records: Sequence[ProgramRecord]) -> list[str]:
    lines = []
    for r in records:
        lines += _describe(r, "Program")
    return lines


def propose_procedure_factors(
    gateway: Gateway,
    high_group: Sequence[ProgramRecord],
    low_group: Sequence[ProgramRecord],
    max_new: int,
    existing: Sequence[ProcedureFactor] = (),
) -> list[dict]:
    if not high_group or not low_group:
        raise ValueError("both contrast groups must be non-empty")
    user = ["## High-scoring programs"] + _record_lines(high_group)
    user += ["", "## Low-scoring programs"] + _record_lines(low_group)
    if existing:
        user += ["", "Already tracked: " + ", ".join(f.name for f in existing)]
    user += [
        "",
        f"Name up to {max_new} new boolean construction properties that separate the two groups. "
        'Reply with a JSON list: [{"name": "<snake_case>", "description": "<text>"}].',
    ]
    response = gateway.complete(ChatRequest(PROPOSE_SYSTEM, "\n".join(user), tag="propose_factors"))
    try:
        proposals = _factor_dicts(_loads_lenient(response.text))
    except (ValueError, json.JSONDecodeError) as exc:
        logger.warning("could not parse factor proposals: %s", exc)
        return []
    return proposals[:max_new]


def annotate_factors(
    gateway: Gateway, record: ProgramRecord, active_factors: Sequence[ProcedureFactor]
) -> dict[str, bool]:
    if not active_factors:
        return {}
    user = _describe(record, "Candidate") + ["", "Properties:"]
    user += [f"- {f.name}: {f.description}" for f in active_factors]
    response = gateway.complete(ChatRequest(ANNOTATE_SYSTEM, "\n".join(user), tag="annotate", temperature=0.0))
    names = [f.name for f in active_factors]
    try:
        obj = _loads_lenient(response.text)
        if not isinstance(obj, dict):
            raise ValueError("expected a JSON object")
    except (ValueError, json.JSONDecodeError) as exc:
        logger.warning("could not parse annotation for %s: %s", record.id, exc)
        return {n: False for n in names}
    return {n: obj.get(n) is True for n in names}


def request_abduction(
    gateway: Gateway, digest: str, surprises: Sequence[SurpriseEvent], generation: int = 0
) -> Hypothesis | None:
    if not surprises:
        raise ValueError("abduction needs at least one surprise")
    user = [digest, "", "Surprises to explain:"]
    for e in surprises:
        user.append(
            f"- {e.factor}: {e.kind.replace('_', ' ')}, effect {e.prev.ate:+.4g} -> {e.curr.ate:+.4g}"
        )
    response = gateway.complete(ChatRequest(ABDUCE_SYSTEM, "\n".join(user), tag="abduce"))
    try:
        obj = _loads_lenient(response.text)
        text = str(obj["hypothesis"]).strip()
        if not text:
            raise ValueError("empty hypothesis")
        factors = _factor_dicts(obj.get("new_factors", []))
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        logger.warning("discarding unparseable abduction: %s", exc)
        return None
    return Hypothesis(
        text=text,
        proposed_factors=[
            ProcedureFactor(f["name"], f["description"], origin="abduced", created_at_generation=generation)
            for f in factors
        ],
        triggering_events=[e.id for e in surprises],
    )
