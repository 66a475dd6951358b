import time
from contextlib import contextmanager

import pytest

_RESULTS = {}


class _Check:
    def __init__(self):
        self.detail = ""
        self.started = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.started


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion for the end-of-run summary."""

    @contextmanager
    def record(number: int, title: str):
        check = _Check()
        try:
            yield check
        except BaseException as exc:
            _RESULTS[number] = (title, False, check.detail or f"{type(exc).__name__}: {exc}".splitlines()[0])
            raise
        _RESULTS[number] = (title, True, check.detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, detail = _RESULTS[number]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}: {detail}")
