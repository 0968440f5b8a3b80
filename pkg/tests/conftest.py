"""Shared pytest plumbing: the acceptance verdict banner."""
from __future__ import annotations

_VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    """Collect one pass/fail line; echoed in the terminal summary."""
    print(line)
    _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.line(line)
