"""Per-criterion pass/fail reporting for the acceptance suite."""

import time

import pytest

_START = time.monotonic()
_RESULTS: dict[int, tuple[str, str, list]] = {}


def session_elapsed() -> float:
    return time.monotonic() - _START


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")
    config.addinivalue_line("markers", "run_last: run after every other test")


def pytest_collection_modifyitems(items):
    # the suite-runtime check must see the whole session
    items.sort(key=lambda item: item.get_closest_marker("run_last") is not None)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed
    if report.when == "call" or failed or (report.when == "setup" and report.skipped):
        state = "FAIL" if failed else ("SKIP" if report.skipped else "PASS")
        previous = _RESULTS.get(number)
        if previous is None or previous[1] == "PASS":
            _RESULTS[number] = (title, state, list(item.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, state, props = _RESULTS[number]
        measured = " ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"criterion {number:2d} {title}: {state}" + (f"  [{measured}]" if measured else ""))
