import numpy as np
import pytest

from tden.gradcheck import tiny_batch, tiny_world
from tden.model import TdenModel
from tden.nn import tiny_config


@pytest.fixture
def tiny_cfg():
    return tiny_config(init_std=0.3)


@pytest.fixture
def tiny_model(tiny_cfg):
    return TdenModel(tiny_cfg, 0)


@pytest.fixture
def world(tiny_cfg):
    return tiny_world(tiny_cfg)


@pytest.fixture
def batch(tiny_cfg):
    return tiny_batch(tiny_cfg, 3, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
