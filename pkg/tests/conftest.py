import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from neuroswift import dataio as dio
from neuroswift import training as tr

settings.register_profile("neuroswift", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("neuroswift")


@pytest.fixture(scope="session")
def world():
    return dio.generate_world(0)


@pytest.fixture(scope="session")
def small_subject(world):
    return dio.generate_subject(world, "subj01", 240, 40)


@pytest.fixture(scope="session")
def small_config():
    return tr.TrainConfig(epochs=4, batch_size=32, hidden=32, blocks=1, seed=0)


@pytest.fixture(scope="session")
def small_ckpt(world, small_subject, small_config):
    return tr.pretrain(small_subject[0], world, small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
