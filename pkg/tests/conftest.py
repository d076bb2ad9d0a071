import time

import pytest

ACCEPTANCE = {}
_START = time.perf_counter()


def record(criterion, passed, detail):
    """Store one acceptance line; the terminal summary prints them in order."""
    ACCEPTANCE[criterion] = (bool(passed), detail)
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    return line


@pytest.fixture
def acceptance_record():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
    terminalreporter.write_line(f"session wall time: {time.perf_counter() - _START:.1f} s")
