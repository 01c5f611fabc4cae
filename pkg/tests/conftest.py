import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.differing_executors],
)
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_trace():
    """Three entries over four iterations: {1}, {2}, {1}, {0, 2}."""
    from corrnoise.trace import AccessTrace
    return AccessTrace.from_sets(3, [{1}, {2}, {1}, {0, 2}])


_acceptance = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and (report.when == "call" or report.outcome != "passed"):
        _acceptance.append(report)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for rep in _acceptance:
        name = rep.nodeid.split("::")[-1].removeprefix("test_")
        status = "PASS" if rep.passed else "FAIL"
        terminalreporter.write_line(f"{status} {name} ({rep.duration:.2f}s)")
