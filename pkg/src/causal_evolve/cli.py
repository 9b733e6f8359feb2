"""Command-line entry point. JSON (or CSV) on stdout, diagnostics on stderr."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import theory
from .archive import ArchiveParseError, load_archive
from .engine import (
    ConfigError,
    EvolutionAborted,
    EvolveConfig,
    StepOutOfRange,
    replay_audit,
    report_at_steps,
    run_evolution,
)
from .gateway import Gateway
from .metrics import compute_metrics
from .tasks import TASKS, SolutionError, evaluate, parse_solution

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="causal-evolve", description="Metric-steered program evolution toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("evolve", help="run an evolution from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="snapshot to continue from")

    for name in ("evaluate", "metrics"):
        p = sub.add_parser(name, help=f"{name} a solution file")
        p.add_argument("--task", required=True, choices=TASKS)
        p.add_argument("--solution", required=True)
        if name == "evaluate":
            p.add_argument("--mode", default="exact", choices=("exact", "relaxed"))

    p = sub.add_parser("report", help="stepwise mean/best table across run logs")
    p.add_argument("--runs", required=True, nargs="+")
    p.add_argument("--steps", required=True, nargs="+", type=int)
    p.add_argument("--label", default="")

    p = sub.add_parser("replay", help="recompute every record of a run log and report mismatches")
    p.add_argument("--archive", required=True)
    p.add_argument("--size", type=int)

    p = sub.add_parser("theory-etc", help="estimate-then-commit versus uniform black-box search")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("theory-barrier", help="source-only policies against two indistinguishable hypotheses")
    p.add_argument("--delta-margin", type=float, required=True)
    p.add_argument("--budget", type=int, default=50)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {path}")
    return p


def _emit(obj) -> None:
    print(json.dumps(obj, indent=None, allow_nan=False))


def _cmd_evolve(args) -> int:
    config_path = _existing(args.config)
    try:
        config = EvolveConfig.from_file(config_path)
    except (ConfigError, json.JSONDecodeError) as exc:
        raise UsageError(f"invalid config {config_path}: {exc}") from exc
    if not config.gateway:
        raise UsageError(f"config {config_path} has no gateway section")
    if args.resume:
        _existing(args.resume)
    base = config_path.parent
    gateway = Gateway.from_config(config.gateway, base_dir=base)
    out = Path(config.output_dir) if config.output_dir else base / "runs" / (config.run_id or f"{config.task}-seed{config.seed}")
    if not out.is_absolute():
        out = base / out
    try:
        report = run_evolution(config, gateway, output_dir=out, resume_from=args.resume)
    except EvolutionAborted as exc:
        print(f"run aborted: {exc}; resume from {exc.snapshot_path}", file=sys.stderr)
        return EXIT_FAILURE
    _emit(report.to_json())
    return EXIT_OK


def _load_solution(args):
    path = _existing(args.solution)
    return parse_solution(args.task, path.read_bytes())


def _cmd_evaluate(args) -> int:
    payload = _load_solution(args)
    _emit(evaluate(payload, mode=args.mode).to_json())
    return EXIT_OK


def _cmd_metrics(args) -> int:
    payload = _load_solution(args)
    ms = compute_metrics(payload)
    _emit({"task": args.task, "metrics": ms.values, "flags": sorted(ms.flags)})
    return EXIT_OK


def _cmd_report(args) -> int:
    archives = [load_archive(_existing(p)) for p in args.runs]
    table = report_at_steps(archives, args.steps)
    print(table.format(args.label), file=sys.stderr)
    _emit(table.to_json())
    return EXIT_OK


def _cmd_replay(args) -> int:
    archive = load_archive(_existing(args.archive))
    mismatches = replay_audit(archive, size=args.size)
    _emit(
        {
            "records": len(archive),
            "mismatches": [
                {"id": m.record_id, "field": m.field, "stored": m.stored, "recomputed": m.recomputed}
                for m in mismatches
            ],
        }
    )
    return EXIT_OK if not mismatches else EXIT_FAILURE


def _cmd_theory_etc(args) -> int:
    etc = theory.etc_trials(args.d, args.K, args.epsilon, args.delta, args.sigma, args.trials, args.seed)
    rows = [etc.row()]
    if etc.budget >= args.K:
        bb = theory.blackbox_trials(
            args.K, args.epsilon, args.delta, args.sigma, etc.budget, args.trials, args.seed, d=args.d
        )
        rows.append(bb.row())
    sys.stdout.write(theory.to_csv(rows))
    return EXIT_OK


def _cmd_theory_barrier(args) -> int:
    results = theory.barrier_experiment(args.delta_margin, args.budget, args.trials, seed=args.seed)
    sys.stdout.write(theory.to_csv(theory.barrier_rows(results), theory.BARRIER_COLUMNS))
    return EXIT_OK


COMMANDS = {
    "evolve": _cmd_evolve,
    "evaluate": _cmd_evaluate,
    "metrics": _cmd_metrics,
    "report": _cmd_report,
    "replay": _cmd_replay,
    "theory-etc": _cmd_theory_etc,
    "theory-barrier": _cmd_theory_barrier,
}


def run_command(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolutionError, ArchiveParseError, StepOutOfRange, theory.TheoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(run_command())
