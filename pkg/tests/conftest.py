import numpy as np
import pytest

# criterion label -> list of per-test outcomes
ACCEPTANCE_RESULTS: dict[str, list[str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_collection_modifyitems(items):
    for item in items:
        for mark in item.iter_markers("criterion"):
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    if report.when == "call" or report.outcome != "passed":
        for key, value in report.user_properties:
            if key == "criterion":
                ACCEPTANCE_RESULTS.setdefault(value, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda s: int(s.split(".")[0])):
        outcomes = ACCEPTANCE_RESULTS[name]
        status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"{status} {name}")
