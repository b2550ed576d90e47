import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

_CRITERIA: dict[int, tuple[bool, str, str]] = {}


class CriterionLog:
    """Records one pass/fail line per acceptance criterion."""

    def __call__(self, number: int, title: str, passed: bool, detail: str = "") -> bool:
        passed = bool(passed)
        _CRITERIA[number] = (passed, title, detail)
        print(_line(number, passed, title, detail), flush=True)
        return passed


def _line(number: int, passed: bool, title: str, detail: str) -> str:
    return f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}" + (f" :: {detail}" if detail else "")


@pytest.fixture(scope="session")
def criterion():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, title, detail = _CRITERIA[number]
        terminalreporter.write_line(_line(number, passed, title, detail))
