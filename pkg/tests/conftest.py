from __future__ import annotations

from contextlib import contextmanager

import pytest

VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL verdict per acceptance criterion."""
    store = request.config.stash.setdefault(VERDICTS, {})

    @contextmanager
    def record(n: int, text: str):
        try:
            yield
        except BaseException:
            store[n] = f"FAIL criterion {n}: {text}"
            print(store[n])
            raise
        store[n] = f"PASS criterion {n}: {text}"
        print(store[n])

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        terminalreporter.write_line(store[n])
