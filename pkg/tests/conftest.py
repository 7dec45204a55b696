"""Collects acceptance-criterion outcomes and prints one PASS/FAIL line per criterion."""

import pytest


_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    """Call with a short string to attach measured values to the criterion line."""
    return lambda text: request.node.user_properties.append(("detail", text))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props or report.when == "teardown" or (report.when == "setup" and report.passed):
        return
    _RESULTS[props["criterion"]] = (report.passed, props.get("detail", ""))


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", m.args))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (ok, text) in sorted(_RESULTS.items()):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{text}]" if text else ""))
