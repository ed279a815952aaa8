"""Shared pytest wiring: the acceptance-criteria report.

Tests marked ``@pytest.mark.acceptance(n, "name")`` get one PASS/FAIL line
each in a summary block at the end of the run, keyed by criterion number.
"""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "acceptance(num, name): headline acceptance criterion, reported "
        "one line per criterion at the end of the run")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    num, name = marker.args
    if report.when == "setup" and not report.passed:
        _RESULTS[num] = (name, False)
    elif report.when == "call":
        _RESULTS[num] = (name, report.passed)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        name, passed = _RESULTS[num]
        terminalreporter.write_line(
            f"ACCEPTANCE {num} {name}: {'PASS' if passed else 'FAIL'}")
