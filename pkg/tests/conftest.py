import numpy as np
import pytest

from batchsoc.process_model import fed_batch_reactor
from batchsoc.scenario import nominal_scenario
from batchsoc.trajectory_opt import add_second_order, optimize_trajectory


@pytest.fixture(scope="session")
def reactor():
    return fed_batch_reactor()


@pytest.fixture(scope="session")
def nominal_traj(reactor):
    s = nominal_scenario(reactor)
    lo, hi = reactor.stacked_bounds()
    tr = optimize_trajectory(reactor, s, lo + 0.1 * (hi - lo))
    return add_second_order(reactor, s, tr)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
