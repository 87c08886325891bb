import contextlib
import os
import sys
import time

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_CRITERIA = {}


class _Outcome:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """Context manager recording one acceptance criterion's verdict and detail line."""

    @contextlib.contextmanager
    def record(number, title):
        out = _Outcome()
        start = time.perf_counter()
        try:
            yield out
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            _CRITERIA[number] = (False, title, f"{out.detail} {msg}".strip(), time.perf_counter() - start)
            raise
        _CRITERIA[number] = (True, title, out.detail, time.perf_counter() - start)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title, detail, seconds = _CRITERIA[number]
        terminalreporter.write_line(
            f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {title} [{seconds:.1f}s] {detail}".rstrip())
