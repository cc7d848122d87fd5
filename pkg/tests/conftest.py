import contextlib
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_VERDICTS: dict[int, str] = {}


class _Verdict:
    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.detail = ""


@pytest.fixture
def criterion():
    """``with criterion(n, title) as v: ...`` records one PASS/FAIL line for
    acceptance criterion ``n``; any exception inside the block is a FAIL."""

    @contextlib.contextmanager
    def open_(number: int, title: str):
        v = _Verdict(number, title)
        try:
            yield v
        except BaseException as e:
            _record(v, False, v.detail or f"{type(e).__name__}: {e}".splitlines()[0])
            raise
        _record(v, True, v.detail)

    return open_


def _record(v: _Verdict, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {v.number}: {v.title}"
    if detail:
        line += f" | {detail}"
    _VERDICTS[v.number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[n])
