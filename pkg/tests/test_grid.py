"""Tests for the feeder topology and the LinDistFlow matrices"""
import numpy as np
import pytest

from src.errors import ConfigError, DimensionError, ModelError, TopologyError
from src.grid import (FeederTopology, Line, build_feeder, feeder_from_matrices, path_matrix,
                      voltage_from_injections)


def test_two_bus_path_sums(two_bus_model):
    np.testing.assert_allclose(two_bus_model.X, [[0.2, 0.2], [0.2, 0.3]], atol=1e-15)
    np.testing.assert_allclose(two_bus_model.R, [[0.1, 0.1], [0.1, 0.2]], atol=1e-15)


def test_d_split_reconstructs_x_inverse_r(two_bus_model):
    D = np.linalg.solve(two_bus_model.X, two_bus_model.R)
    np.testing.assert_allclose(two_bus_model.D_e + two_bus_model.D_o, D, atol=1e-12)
    assert np.all(np.diag(two_bus_model.D_o) == 0)
    assert np.count_nonzero(two_bus_model.D_e - np.diag(np.diag(two_bus_model.D_e))) == 0


def test_scale_factor_doubles_matrices(two_bus_topology):
    model = build_feeder(two_bus_topology, scale_factor=2.0)
    np.testing.assert_allclose(model.X, [[0.4, 0.4], [0.4, 0.6]], atol=1e-15)


def test_bad_scale_factor(two_bus_topology):
    with pytest.raises(ConfigError):
        build_feeder(two_bus_topology, scale_factor=0.0)


def test_zero_resistance_rejected():
    with pytest.raises(TopologyError):
        FeederTopology(bus_count=1, lines=((0, 1, 0.0, 1.0),))


@pytest.mark.parametrize('lines', [
    ((0, 1, 0.1, 0.1), (0, 1, 0.1, 0.1)),          # duplicated line: cycle, bus 2 unreachable
    ((0, 1, 0.1, 0.1), (1, 3, 0.1, 0.1)),          # unknown bus
    ((0, 1, 0.1, 0.1), (2, 2, 0.1, 0.1)),          # self loop
    ((0, 1, 0.1, 0.1),),                           # too few lines
])
def test_invalid_topologies(lines):
    with pytest.raises(TopologyError):
        FeederTopology(bus_count=2, lines=lines)


def test_lines_are_normalized():
    topology = FeederTopology(bus_count=1, lines=[(0, 1, 0.1, 0.2)])
    assert topology.lines == (Line(0, 1, 0.1, 0.2),)


def test_path_matrix_branching_feeder():
    # 0 -> 1 -> 2 and 1 -> 3
    topology = FeederTopology(bus_count=3, lines=((0, 1, 1, 1), (1, 2, 1, 1), (1, 3, 1, 1)))
    np.testing.assert_array_equal(path_matrix(topology), [[1, 1, 1], [0, 1, 0], [0, 0, 1]])
    model = build_feeder(topology)
    np.testing.assert_allclose(model.X, [[1, 1, 1], [1, 2, 1], [1, 1, 2]])


def test_ieee33_matrices(ieee33_model):
    X = ieee33_model.X
    assert X.shape == (32, 32)
    assert np.max(np.abs(X - X.T)) < 1e-12
    assert np.linalg.eigvalsh(X)[0] > 0
    assert np.linalg.eigvalsh(ieee33_model.R)[0] > 0
    assert ieee33_model.x_condition > 1


def test_bus_relabeling_permutes_matrices():
    # swap the labels of buses 1 and 2 on a star feeder
    star = FeederTopology(bus_count=2, lines=((0, 1, 0.1, 0.2), (0, 2, 0.3, 0.4)))
    swapped = FeederTopology(bus_count=2, lines=((0, 2, 0.1, 0.2), (0, 1, 0.3, 0.4)))
    perm = [1, 0]
    a, b = build_feeder(star), build_feeder(swapped)
    np.testing.assert_allclose(b.X, a.X[np.ix_(perm, perm)])
    np.testing.assert_allclose(b.R, a.R[np.ix_(perm, perm)])


def test_model_is_immutable(two_bus_model):
    with pytest.raises(ValueError):
        two_bus_model.X[0, 0] = 5.0


def test_feeder_from_matrices_checks(two_bus_model):
    with pytest.raises(DimensionError):
        feeder_from_matrices(np.eye(2), np.eye(3))
    with pytest.raises(ModelError):
        feeder_from_matrices(np.eye(2), [[1.0, 2.0], [2.0, 1.0]])
    model = feeder_from_matrices(two_bus_model.R, two_bus_model.X)
    assert model.topology is None
    np.testing.assert_allclose(model.x_sqrt @ model.x_sqrt, model.X, atol=1e-14)
    np.testing.assert_allclose(model.x_inv @ model.X, np.eye(2), atol=1e-12)


def test_voltage_zero_injection(two_bus_model):
    np.testing.assert_array_equal(voltage_from_injections(two_bus_model, [0, 0], [0, 0]), [1.0, 1.0])


def test_voltage_active_injection(two_bus_model):
    np.testing.assert_allclose(voltage_from_injections(two_bus_model, [1, 0], [0, 0]), [1.1, 1.1])


def test_voltage_cancellation():
    model = feeder_from_matrices([[0.3, 0.1], [0.1, 0.2]], [[0.3, 0.1], [0.1, 0.2]])
    p = np.array([0.4, -1.2])
    np.testing.assert_allclose(voltage_from_injections(model, p, -p), [1.0, 1.0], atol=1e-15)


def test_voltage_is_affine(two_bus_model):
    rng = np.random.default_rng(3)
    p1, q1, p2, q2 = rng.normal(size=(4, 2))
    f = lambda p, q: voltage_from_injections(two_bus_model, p, q) - 1.0
    np.testing.assert_allclose(f(p1 + p2, q1 + q2), f(p1, q1) + f(p2, q2), atol=1e-14)


def test_voltage_dimension_mismatch(two_bus_model):
    with pytest.raises(DimensionError):
        voltage_from_injections(two_bus_model, [1.0], [0.0, 0.0])
