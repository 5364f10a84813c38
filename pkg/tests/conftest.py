import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bronchusnet.synthgen import SynthParams, generate_case  # noqa: E402

SMALL = SynthParams(depth=2, shape=(16, 16, 16), root_radius=1.8, root_length_frac=0.35, min_radius=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def case4():
    return generate_case(0)


@pytest.fixture(scope="session")
def case3():
    return generate_case(0, SynthParams(depth=3))


@pytest.fixture(scope="session")
def small_case():
    return generate_case(0, SMALL)


@pytest.fixture(scope="session")
def benchmark():
    """Seed-0 synthetic benchmark: 100 cases split 70/30, reduced to graphs."""
    from types import SimpleNamespace

    from bronchusnet.pipeline import benchmark_graphs

    train, test = benchmark_graphs(100, 0)
    return SimpleNamespace(train=train, test=test)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
