"""Acceptance verdict collection.

Tests in test_acceptance.py record one verdict per numbered criterion via
``record_criterion``; the terminal-summary hook prints the collected lines
as a block at the end of the run so every criterion shows an explicit
PASS/FAIL line in the output regardless of capture settings.
"""

from __future__ import annotations

_CRITERIA: list[tuple[int, str, str, str]] = []


def record_criterion(number: int, label: str, verdict: str, note: str = "") -> None:
    _CRITERIA.append((number, label, verdict, note))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, label, verdict, note in sorted(_CRITERIA):
        line = f"criterion {number:2d} ({label}): {verdict}"
        if note:
            line += f" -- {note}"
        terminalreporter.write_line(line)
