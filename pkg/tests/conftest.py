import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mgdefense.config import SystemConfig  # noqa: E402

ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def system():
    """The default 4-DG microgrid and its 16 trees."""
    return SystemConfig().build()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
