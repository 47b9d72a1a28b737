import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_LINES = []


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` prints and records one acceptance line."""
    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}"
        _LINES.append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
