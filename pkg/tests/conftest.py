from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict[str, int] = {}
_outcomes: dict[int, list[bool]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _criteria[item.nodeid] = int(mark.args[0])


def pytest_runtest_logreport(report):
    n = _criteria.get(report.nodeid)
    if n is None:
        return
    if report.when == "call" or report.failed:
        _outcomes.setdefault(n, []).append(report.passed and not report.failed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        results = _outcomes[n]
        status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} ({sum(results)}/{len(results)} checks)")
