"""Shared pytest plumbing for the acceptance report.

Acceptance tests append one line per criterion through the
``acceptance_log`` fixture; the lines are echoed in a dedicated terminal
section after the run and written to ``acceptance_report.txt`` at the
repository root so the verdicts survive output capture.
"""

import os

import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Callable that records one acceptance verdict line."""

    def record(line: str) -> None:
        _LINES.append(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _LINES:
        terminalreporter.write_line(line)
    report_path = os.path.join(str(config.rootpath), "acceptance_report.txt")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(_LINES) + "\n")
