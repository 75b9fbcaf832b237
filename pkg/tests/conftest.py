import numpy as np
import pytest

from adaguide import NoiseSchedule, canonical_model
from adaguide.scheduler import KINDS

ALL_SCHEDULES = [NoiseSchedule(k) for k in KINDS]

_acceptance = {}


@pytest.fixture(scope="session")
def model():
    return canonical_model()


@pytest.fixture(params=KINDS)
def schedule(request):
    return NoiseSchedule(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        _acceptance[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in sorted(_acceptance.items()):
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
