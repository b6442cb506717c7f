import logging

import pytest

logging.getLogger("ndrflow").setLevel(logging.ERROR)


@pytest.fixture
def log_key():
    return bytes(range(32))


@pytest.fixture
def seed():
    return bytes(range(100, 132))


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
