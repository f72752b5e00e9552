"""Per-criterion pass/fail summary for tests marked ``criterion(n)``."""
import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "surgery invariants",
    3: "metric oracle equivalence",
    4: "resampler",
    5: "random forest correctness",
    6: "cross-validation protocol",
    7: "end-to-end synthetic experiment",
    8: "reproducibility",
}

_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes.setdefault(marker.args[0], []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        elif all(r == "passed" for r in results):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n} ({CRITERIA[n]}): {status} [{len(results or [])} tests]")
