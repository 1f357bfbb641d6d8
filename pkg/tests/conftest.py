"""Collects the acceptance verdicts and prints them after the test run."""

import pytest

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
        print(ACCEPTANCE[n])
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
