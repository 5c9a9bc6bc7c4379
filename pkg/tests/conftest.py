import sys

import numpy as np
import pytest

from lopa.fm import FMConfig, ToyTransformer

SMALL = FMConfig(d=16, n_heads=2, n_blocks=2, d_ff=32, n_max=32)


@pytest.fixture(scope="session")
def small_fm():
    return ToyTransformer(SMALL)


@pytest.fixture(scope="session")
def default_fm():
    return ToyTransformer(FMConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
