import numpy as np
import pytest

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion and assert on it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
