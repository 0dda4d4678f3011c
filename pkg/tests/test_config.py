"""Tests for experiment configs and controller parameter files"""
from pathlib import Path

import numpy as np
import pytest
import yaml

from conftest import make_params
from src.config import (ExperimentConfig, config_hash, load_config, load_params, load_scenario_config,
                        save_params)
from src.control import ControllerParams
from src.errors import ConfigError, FormatError
from src.train import FACTOR_JITTER

CONFIG_DIR = Path(__file__).parent.parent / 'configs'


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data), encoding='utf-8')
    return path


def test_defaults():
    config = load_config()
    assert config.seed == 0
    assert config.controller.epsilon == 'auto'
    assert config.cost.gamma == 0.001
    assert config.evaluate.ratios == [0.5, 1.0, 1.5]
    assert config.feeder.resolved_path().name.startswith('ieee33')


@pytest.mark.parametrize('name', ['sinusoidal.yaml', 'sinusoidal_clamped.yaml', 'trace_exact.yaml'])
def test_bundled_configs_load(name):
    config = load_config(CONFIG_DIR / name)
    assert config.output.directory.startswith('out/')


def test_bundled_trace_config_uses_exact_basis():
    config = load_config(CONFIG_DIR / 'trace_exact.yaml')
    assert config.scenario.basis_kind == 'exact'
    assert config.scenario.trace == 'out/gen/scenario_trace.csv'


def test_sections_override_defaults(tmp_path):
    path = write_yaml(tmp_path / 'exp.yaml', {
        'scenario': {'seed': 42, 'horizon': 50, 'basis': {'kind': 'sinusoidal', 'frequencies': [0.02], 'window': 10}},
        'controller': {'epsilon': 0.02, 'clamp': True},
        'cost': {'gamma': 0.01, 'v_norm': 'L2'},
    })
    config = load_config(path)
    assert config.seed == 42
    assert config.scenario.basis_frequencies == [0.02]
    assert config.scenario.basis_window == 10
    assert config.controller.clamp is True
    assert config.cost.v_norm == 'L2'
    assert config.train.epochs == 100


@pytest.mark.parametrize('data', [
    {'plots': {}},
    {'controller': {'gain': 1.0}},
    {'scenario': {'basis': {'shape': 'square'}}},
    {'scenario': {'basis': 'sinusoidal'}},
    {'controller': {'p_convention': 'previous'}},
    {'cost': {'gamma': -1.0}},
    {'train': {'gradient_mode': 'adjoint'}},
    {'evaluate': {'ratios': []}},
    {'feeder': {'scale_factor': 0.0}},
    {'scenario': {'c_min': 0.5, 'c_max': 0.1}},
    {'output': 'out'},
])
def test_invalid_configs(tmp_path, data):
    with pytest.raises(ConfigError):
        load_config(write_yaml(tmp_path / 'bad.yaml', data))


def test_unreadable_configs(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / 'missing.yaml')
    broken = tmp_path / 'broken.yaml'
    broken.write_text("scenario: [unclosed\n", encoding='utf-8')
    with pytest.raises(ConfigError):
        load_config(broken)
    listing = write_yaml(tmp_path / 'list.yaml', [1, 2])
    with pytest.raises(ConfigError):
        load_config(listing)


def test_config_hash(tmp_path):
    first = load_config(write_yaml(tmp_path / 'a.yaml', {'scenario': {'seed': 4}}))
    second = load_config(write_yaml(tmp_path / 'b.yaml', {'scenario': {'seed': 4}}))
    assert config_hash(first) == config_hash(second)
    assert len(config_hash(first)) == 64
    assert config_hash(first) != config_hash(ExperimentConfig())
    assert config_hash(first) == config_hash(first.to_dict())


def test_train_config_resolves_epsilon(two_bus_model):
    train = load_config().train_config(two_bus_model)
    assert train.epsilon == pytest.approx(0.01)
    assert train.alpha == pytest.approx(0.99)
    assert train.cost.gamma == 0.001


def test_load_scenario_config(tmp_path):
    flat = load_scenario_config(write_yaml(tmp_path / 'flat.yaml', {'seed': 9, 'noise_amp': 0.01}))
    nested = load_scenario_config(write_yaml(tmp_path / 'nested.yaml', {'scenario': {'seed': 9, 'noise_amp': 0.01}}))
    assert flat == nested
    assert flat.seed == 9
    with pytest.raises(ConfigError):
        load_scenario_config(write_yaml(tmp_path / 'bad.yaml', {'seed': 9, 'gain': 2}))
    with pytest.raises(FileNotFoundError):
        load_scenario_config(tmp_path / 'missing.yaml')


def test_params_round_trip(tmp_path):
    A = np.zeros((2, 2, 2))
    A[0] = [[0.5, 0.1], [0.1, 0.3]]
    A[1, 0, 0] = 0.2
    params = ControllerParams(k=[1.5, 2.5], A=A, dims=(2, 1), alpha=0.9, epsilon=0.05, u_max=[0.02, 0.03])
    path = tmp_path / 'params.yaml'
    save_params(path, params, provenance={'config_hash': 'abc', 'seed': 3})
    raw = yaml.safe_load(path.read_text(encoding='utf-8'))
    assert raw['config_hash'] == 'abc'
    assert raw['A'][1] == [[0.2]]
    loaded = load_params(path)
    np.testing.assert_array_equal(loaded.k, params.k)
    np.testing.assert_array_equal(loaded.A, params.A)
    np.testing.assert_array_equal(loaded.u_max, params.u_max)
    assert loaded.dims == (2, 1)
    assert (loaded.alpha, loaded.epsilon, loaded.controller) == (0.9, 0.05, 'adaptive')


def test_params_without_bounds(tmp_path):
    path = tmp_path / 'params.yaml'
    save_params(path, make_params([1.0], A=[0.1], controller='linear'))
    loaded = load_params(path)
    assert loaded.u_max is None
    assert loaded.controller == 'linear'


def test_params_from_cholesky_factors(tmp_path):
    path = write_yaml(tmp_path / 'chol.yaml', {
        'k': [1.0, 2.0], 'A_chol': [[[2.0]], [[0.5]]], 'alpha': 0.5, 'epsilon': 0.01,
    })
    params = load_params(path)
    np.testing.assert_allclose(params.A[:, 0, 0], [4.0 + FACTOR_JITTER, 0.25 + FACTOR_JITTER])
    assert params.controller == 'adaptive'


@pytest.mark.parametrize('data', [
    {'k': [1.0], 'alpha': 0.5, 'epsilon': 0.01},
    {'k': [1.0], 'A': [[[0.1]]], 'epsilon': 0.01},
    {'k': [1.0, 2.0], 'A': [[[0.1]]], 'alpha': 0.5, 'epsilon': 0.01},
    {'k': [1.0], 'A': [[[0.1, 0.0]]], 'alpha': 0.5, 'epsilon': 0.01},
    {'k': [1.0], 'A': [[[0.1]]], 'dims': [1, 1], 'alpha': 0.5, 'epsilon': 0.01},
    {'k': ['fast'], 'A': [[[0.1]]], 'alpha': 0.5, 'epsilon': 0.01},
    {'k': [1.0], 'A': [[[0.1]]], 'alpha': 0.5, 'epsilon': 0.01, 'u_max': [0.1, 0.2]},
])
def test_malformed_params(tmp_path, data):
    with pytest.raises(FormatError):
        load_params(write_yaml(tmp_path / 'params.yaml', data))


def test_unreadable_params(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_params(tmp_path / 'missing.yaml')
    broken = tmp_path / 'broken.yaml'
    broken.write_text("k: [1.0\n", encoding='utf-8')
    with pytest.raises(FormatError):
        load_params(broken)
    with pytest.raises(FormatError):
        load_params(write_yaml(tmp_path / 'scalar.yaml', 3))
