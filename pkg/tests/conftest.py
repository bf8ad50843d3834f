import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pdk.fixtures import preset, render  # noqa: E402


@pytest.fixture(scope="session")
def bundles():
    cache = {}

    def get(name, seed=0):
        if (name, seed) not in cache:
            cache[(name, seed)] = render(preset(name, seed))
        return cache[(name, seed)]

    return get


def pytest_sessionstart(session):
    session.config._pdk_start = time.perf_counter()


def pytest_terminal_summary(terminalreporter, config):
    import acceptance_log

    if not acceptance_log.RESULTS:
        return
    elapsed = time.perf_counter() - config._pdk_start
    terminalreporter.section("acceptance criteria")
    for line in acceptance_log.lines(elapsed):
        terminalreporter.write_line(line)
