import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_LINES: dict[int, str] = {}
_EXPECTED: set[int] = set()


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark:
            _EXPECTED.add(mark.args[0])


@pytest.fixture
def record_criterion():
    """Record one pass/fail line per acceptance criterion."""
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        _LINES[number] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _EXPECTED:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_EXPECTED):
        terminalreporter.write_line(_LINES.get(n, f"criterion {n}: FAIL - did not complete"))
