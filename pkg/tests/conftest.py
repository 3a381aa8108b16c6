import numpy as np
import pytest

from core.barrier import barrier_preset
from core.config import BarrierConfig
from core.envs import QuadrotorEnv, UnicycleEnv


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def quadrotor():
    return QuadrotorEnv(state=np.array([0.0, 0.0]), rng=np.random.default_rng(7))


@pytest.fixture
def unicycle():
    return UnicycleEnv(state=np.array([0.0, 0.0, 0.0]), rng=np.random.default_rng(7))


@pytest.fixture
def box_barriers():
    return barrier_preset(BarrierConfig(preset="quadrotor_box", eta=0.01))
