import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one acceptance line: ``acceptance(key, title, passed, detail)``."""

    def record(key, title, passed, detail=""):
        _ACCEPTANCE[key] = (title, bool(passed), detail)
        print(f"[{'PASS' if passed else 'FAIL'}] {key} {title}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k.lstrip("C"))):
        title, ok, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {key:<4} {title}: {detail}")
