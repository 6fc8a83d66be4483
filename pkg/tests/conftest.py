import numpy as np
import pytest
from hypothesis import settings

from bhkam.lattice import ChainGeometry, ModelParams, TruncatedFockSpace

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def params():
    return ModelParams(g=0.5, mu=0.3, delta=0.3, gamma=0.75)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def space(N, n_max):
    return TruncatedFockSpace(ChainGeometry(N), n_max)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
