"""Procedure-level factor ledger.

Factors are boolean properties of how a solution was built. Their effect on the
score is estimated as a plain difference in means between records that have
the factor and records that do not; only the ordering of those estimates is
meant to be trusted. Shifts between successive estimates are flagged as
surprises, which in turn trigger requests for explanatory hypotheses.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

ORIGINS = ("llm_proposed", "abduced", "seed")


class LedgerError(ValueError):
    pass


class UnknownFactorError(KeyError):
    pass


@dataclass
class ProcedureFactor:
    name: str
    description: str
    origin: str = "llm_proposed"
    status: str = "active"
    created_at_generation: int = 0

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise LedgerError("factor name must be non-empty")
        if not self.description or not self.description.strip():
            raise LedgerError(f"factor {self.name!r} needs a description")
        if self.origin not in ORIGINS:
            raise LedgerError(f"unknown origin {self.origin!r}")


@dataclass(frozen=True)
class EffectEstimate:
    factor: str
    window_end: int
    ate: float
    n_present: int
    n_absent: int


@dataclass(frozen=True)
class SurpriseEvent:
    id: int
    factor: str
    prev: EffectEstimate
    curr: EffectEstimate
    kind: str
    generation: int


@dataclass
class Hypothesis:
    text: str
    proposed_factors: list[ProcedureFactor]
    triggering_events: list[int]

    def __post_init__(self):
        if not self.triggering_events:
            raise LedgerError("a hypothesis needs at least one triggering surprise")


def estimate_ate(
    records: Iterable, factor: str, min_support: int = 3, window_end: int | None = None
) -> EffectEstimate | None:
    """Difference of mean scores, factor present minus absent.

    Only records annotated for ``factor`` take part. Returns ``None`` when either
    group has fewer than ``min_support`` records.
    """
    present, absent, seen, last_gen = [], [], False, -1
    for r in records:
        last_gen = max(last_gen, r.generation)
        if factor not in r.factor_flags:
            continue
        seen = True
        (present if r.factor_flags[factor] else absent).append(r.score)
    if not seen:
        raise UnknownFactorError(factor)
    if len(present) < min_support or len(absent) < min_support:
        return None
    ate = math.fsum(present) / len(present) - math.fsum(absent) / len(absent)
    return EffectEstimate(
        factor=factor,
        window_end=last_gen if window_end is None else window_end,
        ate=ate,
        n_present=len(present),
        n_absent=len(absent),
    )


def _sign(x: float) -> int:
    return (x > 0) - (x < 0)


def classify_shift(
    prev_ate: float, curr_ate: float, theta_sig: float, theta_shift: float, score_std: float
) -> str | None:
    """Return ``"sign_inverse"``, ``"magnitude_shift"`` or ``None``."""
    if (
        _sign(prev_ate) != _sign(curr_ate)
        and abs(prev_ate) >= theta_sig
        and abs(curr_ate) >= theta_sig
    ):
        return "sign_inverse"
    delta = abs(curr_ate - prev_ate)
    # a zero score spread means nothing can count as a significant shift
    if score_std > 0 and delta > 0 and delta >= theta_shift * score_std:
        return "magnitude_shift"
    return None


def detect_surprises(
    prev_estimates: dict[str, EffectEstimate],
    curr_estimates: dict[str, EffectEstimate],
    theta_sig: float,
    theta_shift: float,
    score_std: float,
    generation: int = 0,
    first_id: int = 0,
) -> list[SurpriseEvent]:
    if theta_sig <= 0 or theta_shift <= 0:
        raise LedgerError("thresholds must be positive")
    events = []
    for name in sorted(set(prev_estimates) & set(curr_estimates)):
        prev, curr = prev_estimates[name], curr_estimates[name]
        kind = classify_shift(prev.ate, curr.ate, theta_sig, theta_shift, score_std)
        if kind is not None:
            events.append(SurpriseEvent(first_id + len(events), name, prev, curr, kind, generation))
    return events


def population_std(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    mean = math.fsum(values) / len(values)
    return math.sqrt(math.fsum((v - mean) ** 2 for v in values) / len(values))


@dataclass
class FactorLedger:
    min_support: int = 3
    max_active: int = 12
    factors: dict[str, ProcedureFactor] = field(default_factory=dict)
    estimates: dict[str, EffectEstimate] = field(default_factory=dict)
    surprises: list[SurpriseEvent] = field(default_factory=list)
    open_surprises: list[int] = field(default_factory=list)
    hypotheses: list[Hypothesis] = field(default_factory=list)

    def active_factors(self) -> list[ProcedureFactor]:
        return [f for f in self.factors.values() if f.status == "active"]

    def _abs_ate(self, name: str) -> float:
        est = self.estimates.get(name)
        return abs(est.ate) if est is not None else 0.0

    def register_factors(
        self, proposals: Sequence[dict | ProcedureFactor], origin: str = "llm_proposed", generation: int = 0
    ) -> list[ProcedureFactor]:
        """Add new factors, rejecting case-insensitive duplicates.

        When the active set exceeds ``max_active`` the weakest previously active
        factors (smallest |ATE|, unestimated counting as 0) are retired.
        """
        known = {n.lower() for n in self.factors}
        accepted: list[ProcedureFactor] = []
        for p in proposals:
            if isinstance(p, ProcedureFactor):
                factor = p
            else:
                factor = ProcedureFactor(
                    name=str(p.get("name", "")).strip(),
                    description=str(p.get("description", "")).strip(),
                    origin=origin,
                    created_at_generation=generation,
                )
            if factor.name.lower() in known:
                logger.info("rejecting duplicate factor %r", factor.name)
                continue
            self.factors[factor.name] = factor
            known.add(factor.name.lower())
            accepted.append(factor)
            self._enforce_cap(protected={f.name for f in accepted})
        return accepted

    def _enforce_cap(self, protected: set[str]) -> None:
        active = self.active_factors()
        excess = len(active) - self.max_active
        if excess <= 0:
            return
        # factors accepted in the current batch are retired only as a last resort
        candidates = sorted(
            active,
            key=lambda f: (f.name in protected, self._abs_ate(f.name), f.created_at_generation, f.name),
        )
        for f in candidates[:excess]:
            f.status = "retired"
            logger.info("retiring factor %r (|ate| %.4g)", f.name, self._abs_ate(f.name))

    def reestimate(self, records: Sequence, generation: int, theta_sig_mult: float, theta_shift: float) -> list[SurpriseEvent]:
        """Refresh estimates for active factors and record new surprises."""
        scores = [r.score for r in records if r.valid]
        score_std = population_std(scores)
        fresh: dict[str, EffectEstimate] = {}
        for f in self.active_factors():
            try:
                est = estimate_ate(records, f.name, self.min_support, window_end=generation)
            except UnknownFactorError:
                continue
            if est is not None:
                fresh[f.name] = est
        events: list[SurpriseEvent] = []
        if score_std > 0:
            events = detect_surprises(
                self.estimates,
                fresh,
                theta_sig=theta_sig_mult * score_std,
                theta_shift=theta_shift,
                score_std=score_std,
                generation=generation,
                first_id=len(self.surprises),
            )
        self.estimates.update(fresh)
        self.surprises.extend(events)
        self.open_surprises.extend(e.id for e in events)
        return events

    def record_hypothesis(self, hypothesis: Hypothesis, generation: int) -> list[ProcedureFactor]:
        self.hypotheses.append(hypothesis)
        closed = set(hypothesis.triggering_events)
        self.open_surprises = [i for i in self.open_surprises if i not in closed]
        if not hypothesis.proposed_factors:
            return []
        return self.register_factors(
            [{"name": f.name, "description": f.description} for f in hypothesis.proposed_factors],
            origin="abduced",
            generation=generation,
        )

    def open_events(self) -> list[SurpriseEvent]:
        by_id = {e.id: e for e in self.surprises}
        return [by_id[i] for i in self.open_surprises]

    def to_json(self) -> dict:
        return {
            "min_support": self.min_support,
            "max_active": self.max_active,
            "factors": [asdict(f) for f in self.factors.values()],
            "estimates": [asdict(e) for e in self.estimates.values()],
            "surprises": [asdict(e) for e in self.surprises],
            "open_surprises": list(self.open_surprises),
            "hypotheses": [asdict(h) for h in self.hypotheses],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FactorLedger":
        ledger = cls(min_support=int(obj["min_support"]), max_active=int(obj["max_active"]))
        for f in obj.get("factors", []):
            ledger.factors[f["name"]] = ProcedureFactor(**f)
        for e in obj.get("estimates", []):
            ledger.estimates[e["factor"]] = EffectEstimate(**e)
        for e in obj.get("surprises", []):
            ledger.surprises.append(
                SurpriseEvent(
                    id=e["id"],
                    factor=e["factor"],
                    prev=EffectEstimate(**e["prev"]),
                    curr=EffectEstimate(**e["curr"]),
                    kind=e["kind"],
                    generation=e["generation"],
                )
            )
        ledger.open_surprises = list(obj.get("open_surprises", []))
        for h in obj.get("hypotheses", []):
            ledger.hypotheses.append(
                Hypothesis(
                    text=h["text"],
                    proposed_factors=[ProcedureFactor(**f) for f in h["proposed_factors"]],
                    triggering_events=list(h["triggering_events"]),
                )
            )
        return ledger


DIGEST_HEADER = "## Causal scratchpad"


def scratchpad_digest(ledger: FactorLedger, top_k: int = 5, max_hypotheses: int = 3) -> str:
    """Deterministic text summary of the strongest active factors, open surprises and hypotheses."""
    lines = [DIGEST_HEADER]
    active = ledger.active_factors()
    estimated = [f for f in active if f.name in ledger.estimates]
    estimated.sort(key=lambda f: (-abs(ledger.estimates[f.name].ate), f.name))
    unestimated = sorted((f for f in active if f.name not in ledger.estimates), key=lambda f: f.name)
    shown = (estimated + unestimated)[:top_k]
    if shown:
        lines.append("Factors (effect on score = mean with factor - mean without):")
        for f in shown:
            est = ledger.estimates.get(f.name)
            if est is None:
                lines.append(f"- {f.name}: effect not yet estimated. {f.description}")
            else:
                lines.append(
                    f"- {f.name}: effect {est.ate:+.4g} "
                    f"(n={est.n_present} with / {est.n_absent} without). {f.description}"
                )
    events = [e for e in ledger.open_events() if ledger.factors.get(e.factor, None) is not None
              and ledger.factors[e.factor].status == "active"]
    if events:
        lines.append("Unexplained surprises:")
        for e in events:
            lines.append(
                f"- {e.factor}: {e.kind.replace('_', ' ')} from {e.prev.ate:+.4g} to {e.curr.ate:+.4g} "
                f"at generation {e.generation}"
            )
    if ledger.hypotheses:
        lines.append("Working hypotheses:")
        for h in ledger.hypotheses[-max_hypotheses:]:
            lines.append(f"- {h.text}")
    return "\n".join(lines)
