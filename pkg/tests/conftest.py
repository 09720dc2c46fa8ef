import sys

import numpy as np
import pytest

from quantsr.data import make_synthetic_dataset
from quantsr.model import StudentConfig, TrainModel

TINY = StudentConfig(num_blocks=2, channels=8, num_conv3_branches=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def tiny_pairs():
    return make_synthetic_dataset("mixed", 6, 36, seed=3)


def randomize_bn(model: TrainModel, rng: np.random.Generator) -> TrainModel:
    """Give every BN non-trivial statistics so fusion is actually exercised."""
    for bn in model.bns():
        c = bn.channels
        bn.gamma[...] = rng.uniform(0.5, 1.5, c)
        bn.beta[...] = rng.normal(0, 0.1, c)
        bn.running_mean[...] = rng.normal(0, 0.1, c)
        bn.running_var[...] = rng.uniform(0.5, 2.0, c)
    return model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
