import contextlib
import time

import pytest


def pytest_configure(config):
    config._acceptance = []


@pytest.fixture
def criterion(request):
    """``with criterion(n, name) as c:`` records one pass/fail line; set ``c["detail"]``."""
    lines = request.config._acceptance

    @contextlib.contextmanager
    def record(number, name):
        info = {"detail": ""}
        start = time.perf_counter()
        ok = False
        try:
            yield info
            ok = True
        finally:
            took = time.perf_counter() - start
            detail = f" ({info['detail']})" if info["detail"] else ""
            lines.append((number, f"{'PASS' if ok else 'FAIL'}  criterion {number}: {name}{detail} [{took:.2f}s]"))

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance", [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
