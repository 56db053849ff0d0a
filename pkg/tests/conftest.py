import numpy as np
import pytest
from hypothesis import settings

from ietidp.harness.problems import grid_discretization
from ietidp.ieti import build_ieti

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_cases():
    """Cached serial IETI setups keyed by (dims, p, r, form)."""
    cache = {}

    def get(patches=(2, 2), p=2, r=1, form="cg", problem="benchmark"):
        key = (tuple(patches), p, r, form, problem)
        if key not in cache:
            disc = grid_discretization(len(patches), patches, p, r, form, problem)
            cache[key] = build_ieti(disc)
        return cache[key]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    """Repeat the per-criterion lines printed by the acceptance tests."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance" not in rep.nodeid or rep.when != "call":
                continue
            lines += [l for l in rep.capstdout.splitlines() if l[:1] == "C" and l[1:2].isdigit()]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
