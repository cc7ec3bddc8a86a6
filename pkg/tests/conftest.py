"""Shared fixtures; collects one verdict line per acceptance criterion."""

import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record and print the outcome of an acceptance criterion.

    Call ``verdict(number, title, passed, detail)`` before asserting, so a
    failing criterion still reports what was measured.
    """

    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        _VERDICTS[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])
