import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: list[str] = []


class _Recorder:
    def __init__(self):
        self.label = None
        self.done = False

    def start(self, label: str):
        self.label = label

    def result(self, ok: bool, detail: str, status: str | None = None):
        _ACCEPTANCE.append(f"{self.label}: {status or ('PASS' if ok else 'FAIL')} ({detail})")
        self.done = True


@pytest.fixture
def acceptance():
    """Records one pass/fail line per criterion; an unfinished check counts as a failure."""
    rec = _Recorder()
    yield rec
    if rec.label and not rec.done:
        _ACCEPTANCE.append(f"{rec.label}: FAIL (check did not complete)")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
