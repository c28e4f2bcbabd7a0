import time
from contextlib import contextmanager

import numpy as np
import pytest

ACCEPTANCE_LINES = []


@contextmanager
def criterion(number: int, title: str, max_seconds: float = None):
    """Record a PASS/FAIL line for an acceptance criterion; re-raises failures."""
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        if max_seconds is not None:
            assert elapsed < max_seconds, f"took {elapsed:.2f}s, limit {max_seconds}s"
    except BaseException as exc:
        ACCEPTANCE_LINES.append(f"[FAIL] criterion {number}: {title} ({type(exc).__name__}: {exc})")
        raise
    ACCEPTANCE_LINES.append(f"[PASS] criterion {number}: {title} ({time.perf_counter() - start:.2f}s)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
