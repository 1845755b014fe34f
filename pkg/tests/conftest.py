import contextlib
import time

import pytest

_VERDICTS: list[str] = []


class _Verdict:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """``with criterion(n, title) as v: ...`` records one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        v = _Verdict()
        start = time.perf_counter()
        status = "FAIL"
        try:
            yield v
            status = "PASS"
        finally:
            line = f"criterion {number} [{status}] {title} ({time.perf_counter() - start:.1f}s) {v.detail}".rstrip()
            _VERDICTS.append(line)
            print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
