import os

import hypothesis
import numpy as np
import pytest

from navgym.world import Box, MapDef, bake_occupancy, resolve_map

hypothesis.settings.register_profile("ci", max_examples=40, deadline=None, derandomize=True)
hypothesis.settings.register_profile("thorough", max_examples=400, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture(scope="session")
def desk():
    return resolve_map("toy_desk")


@pytest.fixture(scope="session")
def desk_grid(desk):
    return bake_occupancy(desk, 0.5)


@pytest.fixture(scope="session")
def faithful():
    return resolve_map("toy_faithful")


def flat_map(size=20.0, height=10.0, solids=(), pads=(), name="flat"):
    """Square arena with a 1 m floor slab; extra solids sit on top of it."""
    h = size / 2
    bounds = Box((-h, -1.0, -h), (h, height, h))
    floor = Box((-h, -1.0, -h), (h, 0.0, h))
    return MapDef(name, bounds, (floor,) + tuple(solids), tuple(pads))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
