"""Shared pytest hooks.

The acceptance suite records one verdict line per criterion; they are
printed together at the end of the session so they survive output capture.
"""
import pytest

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def verdict():
    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
