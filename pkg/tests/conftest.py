import pytest

_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == "call" and report.skipped)
    prev = _outcomes.get(number, (title, True))
    _outcomes[number] = (title, prev[1] and not failed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        title, ok = _outcomes[number]
        terminalreporter.write_line(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}")
