"""Acceptance reporting: one PASS / FAIL / NOT RUN line per ``criterion`` label."""
import os

import pytest

_OUTCOMES = {}


def pytest_collection_modifyitems(config, items):
    if os.environ.get("KANJINET_NIGHTLY") == "1":
        return
    skip = pytest.mark.skip(reason="nightly run (set KANJINET_NIGHTLY=1)")
    for item in items:
        if item.get_closest_marker("nightly"):
            item.add_marker(skip)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
            _OUTCOMES.setdefault(label, []).append(("NOT RUN", reason.removeprefix("Skipped: ")))
        else:
            _OUTCOMES.setdefault(label, []).append(("PASS" if report.passed else "FAIL", ""))


def _order(label):
    head = label.split()[0]
    digits = "".join(ch for ch in head if ch.isdigit())
    return int(digits or 0), head


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_OUTCOMES, key=_order):
        results = _OUTCOMES[label]
        states = {state for state, _ in results}
        if "FAIL" in states:
            verdict = "FAIL"
        elif states == {"NOT RUN"}:
            verdict = "NOT RUN"
        else:
            verdict = "PASS"
        reasons = sorted({r for s, r in results if s == "NOT RUN" and r})
        suffix = f"  ({'; '.join(reasons)})" if verdict == "NOT RUN" and reasons else ""
        terminalreporter.write_line(f"{verdict:<8} {label}{suffix}")
