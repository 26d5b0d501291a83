import numpy as np
import pytest

from tswitch.configs import config_factory
from tswitch.utils.tensorstore import NamedTensorSet


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the seed-averaged trend benches and the large randomized sweeps")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains full default suites over several seeds, or sweeps large random inputs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_set(meta=None, **arrays):
    """
    NamedTensorSet from keyword arrays, in keyword order, cast to float32.
    """
    return NamedTensorSet([(k, np.asarray(v, dtype=np.float32)) for k, v in arrays.items()], meta=meta)


@pytest.fixture
def tiny_config():
    """
    A small merge-bench config that trains in a couple of seconds.
    """
    config = config_factory("merge")
    with config.values_unlocked():
        config.experiment.seeds = [0]
        config.experiment.logging.terminal_output_to_txt = False
        config.suite.K = 3
        config.suite.classes = 3
        config.suite.d_in = 6
        config.suite.n_train = 60
        config.suite.n_test = 30
        config.suite.n_pretrain = 30
        config.suite.n_query = 10
        config.suite.task_radius = 8.0
        config.suite.class_radius = 3.0
        config.suite.spread = 0.3
        config.model.hidden = [8]
        config.train.pretrain.epochs = 3
        config.train.finetune.epochs = 5
        config.bench.N = 10
        config.bench.C = 3
        config.bench.N_grid = [5]
        config.bench.C_grid = [1, 100]
    return config
