from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): an acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if report.failed and not detail:
            detail = report.longrepr.reprcrash.message if hasattr(report.longrepr, "reprcrash") else "failed"
        _RESULTS.append((marker.args[0], "PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _RESULTS:
        terminalreporter.write_line(f"{status} {name}: {detail}")
