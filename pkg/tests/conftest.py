import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running ensemble runs")


@pytest.fixture(scope="session")
def nominal():
    from trailer_uq.params import ParameterSet
    return ParameterSet()


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    report = config.stash.get(_ACCEPTANCE, {})
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(report):
        passed, detail = report[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
