"""Collects the outcome of every ``@pytest.mark.criterion`` test and prints
one PASS/FAIL line per acceptance criterion at the end of the run."""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_results: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    number, title = marker.args
    if rep.when == "setup" and rep.passed:
        return
    detail = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")
    _results[number] = dict(title=title, passed=rep.passed, detail=detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        r = _results[number]
        status = "PASS" if r["passed"] else "FAIL"
        line = f"criterion {number:2d} {status}  {r['title']}"
        if r["detail"]:
            line += f"  [{r['detail']}]"
        terminalreporter.write_line(line)
