import numpy as np
import pytest

from metaforge.data import ToyGenSpec, build_toy_metadataset


@pytest.fixture(scope="session")
def toy():
    return build_toy_metadataset(ToyGenSpec(3, 5, 100, 32, seed=9))


@pytest.fixture(scope="session")
def small_toy():
    return build_toy_metadataset(ToyGenSpec(2, 2, 30, 16, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_small(small_toy):
    from metaforge.trainer import train_conventional
    return train_conventional(small_toy, epochs=4, lr=0.1, batch_size=16, seed=0, channels=(8, 16)), small_toy


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
