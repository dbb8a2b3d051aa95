import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_GATE = []


@pytest.fixture
def gate():
    """Record one acceptance line: ``gate(number, passed, detail)``."""
    def record(number, passed, detail):
        _GATE.append((number, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _GATE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_GATE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
