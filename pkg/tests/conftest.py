"""Shared fixtures: small hand-checkable feeders, the bundled 33-bus feeder, certified parameters"""
import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.control import ControllerParams
from src.grid import FeederTopology, build_feeder, bundled_feeder_path, feeder_from_matrices
from src.ingest import load_feeder_file
from src.scenario import BasisSpec, build_scenario, gen_sinusoidal


def pytest_collection_modifyitems(config, items):
    if os.environ.get('VOLTPILOT_ACCEPTANCE') == '1':
        return
    skip_slow = pytest.mark.skip(reason="set VOLTPILOT_ACCEPTANCE=1 to run")
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def two_bus_topology():
    return FeederTopology(bus_count=2, lines=((0, 1, 0.1, 0.2), (1, 2, 0.1, 0.1)))


@pytest.fixture
def two_bus_model(two_bus_topology):
    """X = [[0.2, 0.2], [0.2, 0.3]], R = [[0.1, 0.1], [0.1, 0.2]]"""
    return build_feeder(two_bus_topology)


@pytest.fixture
def scalar_model():
    """n = 1 with R = X = 1"""
    return feeder_from_matrices([[1.0]], [[1.0]])


@pytest.fixture(scope='session')
def ieee33_model():
    return build_feeder(load_feeder_file(bundled_feeder_path()))


def make_params(k, A=None, alpha=0.5, epsilon=0.01, controller='adaptive', u_max=None):
    """ControllerParams with m_i = 1; A given per bus as scalars"""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if A is None:
        A = np.zeros(len(k))
    A = np.asarray(A, dtype=float).reshape(len(k), 1, 1)
    return ControllerParams(k=k, A=A, dims=(1,) * len(k), alpha=alpha, epsilon=epsilon,
                            u_max=u_max, controller=controller)


def tabulated_scenario(phi, c, p0, q0, delta_p=None):
    """Scenario from explicit (T+1, n, m) basis values"""
    phi = np.asarray(phi, dtype=float)
    basis = BasisSpec(dims=(phi.shape[2],) * phi.shape[1], kind='tabulated')
    return build_scenario(phi, c, p0, q0, basis, delta_p=delta_p)


@pytest.fixture
def certified_two_bus(two_bus_model):
    """Adaptive params inside the decentralized set of the 2-bus feeder (eps = 0.01, alpha = 0.99)"""
    from src.certify import condition_c_cap, gain_bounds
    eps, alpha = 0.01, 0.99
    bounds = gain_bounds(two_bus_model, eps)
    cap = condition_c_cap(two_bus_model, eps, alpha)
    return make_params([bounds.midpoint, 0.8 * bounds.midpoint], [0.5 * cap, 0.3 * cap], alpha=alpha, epsilon=eps)


@pytest.fixture
def sinusoidal_two_bus(two_bus_model):
    return gen_sinusoidal(two_bus_model, 60, seed=11)
