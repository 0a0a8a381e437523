"""Emit one ACCEPTANCE line per release-gate criterion at the end of the run."""

_criteria: dict[str, tuple[int, str]] = {}
_outcomes: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(n, slug): release-gate criterion, reported at session end"
    )


def pytest_collection_modifyitems(config, items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark:
            _criteria[item.nodeid] = mark.args


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    if report.when == "call":
        _outcomes[report.nodeid] = "PASS" if report.passed else "FAIL"
    elif report.failed:  # setup or teardown error
        _outcomes[report.nodeid] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    lines = sorted((_criteria[nid], outcome) for nid, outcome in _outcomes.items())
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for (n, slug), outcome in lines:
        terminalreporter.write_line(f"ACCEPTANCE {n} ({slug}): {outcome}")
