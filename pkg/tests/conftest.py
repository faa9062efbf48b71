"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_results: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    """Tests append short measured values here; they are shown on the criterion line."""
    notes: list[str] = []
    request.node.criterion_notes = notes
    return notes


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = rep.failed
    if rep.when == "call" or failed:
        notes = "; ".join(getattr(item, "criterion_notes", []))
        if failed and rep.when != "call":
            notes = f"{rep.when} error"
        prev = _results.get(number)
        if prev is None or prev[0] == "PASS":
            _results[number] = ("FAIL" if failed else "PASS", title, notes)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        status, title, notes = _results[number]
        line = f"criterion {number:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" [{notes}]" if notes else ""))
