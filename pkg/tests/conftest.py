import time

import pytest

_results = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion with a one-line verdict")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call":
        return
    number, title = mark.args
    measured = "; ".join(f"{k}={v}" for k, v in report.user_properties if k != "limit")
    _results.append((number, title, report.passed, report.duration, measured))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, duration, measured in sorted(_results):
        verdict = "PASS" if passed else "FAIL"
        line = f"criterion {number} {verdict} {title} ({duration:.1f}s)"
        terminalreporter.write_line(line + (f" [{measured}]" if measured else ""))


@pytest.fixture
def stopwatch():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start
