import numpy as np
import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """``criterion(n, title, ok, detail)`` prints and records one pass/fail line, then asserts ``ok``."""

    def report(n, title, ok, detail=""):
        line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
