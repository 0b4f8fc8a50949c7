import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fluxattn.attention import SegmentedKvCache

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_cache(rng, L=96, D=8, sink=8, local=16, scale=1.0):
    K = scale * rng.standard_normal((L, D))
    V = rng.standard_normal((L, D))
    return SegmentedKvCache.split(K, V, sink, local), K, V


@pytest.fixture
def small_cache(rng):
    return random_cache(rng)


# -- acceptance criteria reporting -------------------------------------------------

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.skipped:
        return
    n, name = mark.args
    ok = rep.passed if rep.when == "call" else not rep.failed
    prev = _criteria.get(n, (name, True))
    _criteria[n] = (name, prev[1] and ok)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        name, ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {name}")
