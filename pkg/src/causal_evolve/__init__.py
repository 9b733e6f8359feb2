"""Metric-steered program evolution with a causal factor ledger."""

from .archive import Archive, PlannerAction, ProgramRecord, load_archive
from .engine import EvolveConfig, RunReport, report_at_steps, replay_audit, run_evolution
from .gateway import Gateway
from .ledger import FactorLedger
from .metrics import compute_metrics
from .planner import PlannerState
from .tasks import evaluate, parse_solution

__all__ = [
    "Archive",
    "EvolveConfig",
    "FactorLedger",
    "Gateway",
    "PlannerAction",
    "PlannerState",
    "ProgramRecord",
    "RunReport",
    "compute_metrics",
    "evaluate",
    "load_archive",
    "parse_solution",
    "replay_audit",
    "report_at_steps",
    "run_evolution",
]

__version__ = "0.1.0"
