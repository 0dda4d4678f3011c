"""End-to-end tests of the voltpilot command line on a 2-bus feeder"""
import numpy as np
import pytest
import yaml

from conftest import make_params
from src.cli import EXIT_CONDITION, EXIT_DIVERGED, EXIT_INPUT, EXIT_OK, main
from src.config import load_params, save_params
from src.certify import gain_bounds
from src.grid import build_feeder
from src.ingest import load_feeder_file, read_trace_csv
from src.models import ExperimentRun, TrainEpoch, get_session, init_db
from src.reports import read_csv, read_meta

FEEDER = """# two load buses, impedances already in p.u. (z_base = 1)
buses=2 base_kva=1000 base_kv=1
0 1 0.1 0.2
1 2 0.1 0.1
"""

CONFIG = {
    'scenario': {'horizon': 20, 'seed': 3},
    'train': {'horizon': 10, 'batch_size': 2, 'epochs': 2},
    'evaluate': {'test_size': 2, 'ratios': [0.5, 1.0]},
}


@pytest.fixture
def workspace(tmp_path, certified_two_bus):
    feeder = tmp_path / 'two_bus.txt'
    feeder.write_text(FEEDER, encoding='utf-8')
    config = tmp_path / 'experiment.yaml'
    config.write_text(yaml.safe_dump(CONFIG), encoding='utf-8')
    params = tmp_path / 'params.yaml'
    save_params(params, certified_two_bus)
    return tmp_path


def run(workspace, *argv, seed=None):
    prefix = ['--feeder', str(workspace / 'two_bus.txt'), '--config', str(workspace / 'experiment.yaml'),
              '--out', str(workspace / 'out')]
    if seed is not None:
        prefix += ['--seed', str(seed)]
    return main(prefix + list(argv))


def write_params(workspace, name, **changes):
    path = workspace / name
    save_params(path, load_params(workspace / 'params.yaml').with_updates(**changes))
    return path


def test_feeder_file_matches_fixture(workspace, two_bus_model):
    model = build_feeder(load_feeder_file(workspace / 'two_bus.txt'))
    np.testing.assert_allclose(model.X, two_bus_model.X)


def test_no_command_prints_help(capsys):
    assert main([]) == 1
    assert 'usage' in capsys.readouterr().out


def test_certify_passes(workspace, capsys):
    assert run(workspace, 'certify', str(workspace / 'params.yaml')) == EXIT_OK
    assert 'Parameters certified' in capsys.readouterr().out
    report = (workspace / 'out' / 'certify_report.txt').read_text(encoding='utf-8')
    assert 'Result: CERTIFIED' in report
    assert 'config_hash:' in report
    summary = yaml.safe_load((workspace / 'out' / 'certify_report.yaml').read_text(encoding='utf-8'))
    assert summary['passed'] is True
    assert summary['seed'] == 3
    radii = read_csv(workspace / 'out' / 'spectral_radius.csv')
    assert len(radii) == 21
    assert radii['spectral_radius'].max() < 1.0


def test_certify_decentralized_mode(workspace):
    assert run(workspace, 'certify', str(workspace / 'params.yaml'), '--mode', 'decentralized') == EXIT_OK
    summary = yaml.safe_load((workspace / 'out' / 'certify_report.yaml').read_text(encoding='utf-8'))
    assert summary['implication_holds'] is True


def test_certify_fails_on_alpha_one(workspace, capsys):
    bad = write_params(workspace, 'alpha_one.yaml', alpha=1.0)
    assert run(workspace, 'certify', str(bad)) == EXIT_CONDITION
    assert 'condition_b' in capsys.readouterr().out
    assert 'NOT CERTIFIED' in (workspace / 'out' / 'certify_report.txt').read_text(encoding='utf-8')


def test_missing_feeder_is_input_error(workspace, tmp_path):
    code = main(['--feeder', str(tmp_path / 'nowhere.txt'), '--out', str(tmp_path / 'out'),
                 'certify', str(workspace / 'params.yaml')])
    assert code == EXIT_INPUT


def test_missing_params_is_input_error(workspace):
    assert run(workspace, 'certify', str(workspace / 'missing.yaml')) == EXIT_INPUT


def test_simulate_writes_trajectory_and_plot_data(workspace):
    assert run(workspace, 'simulate', str(workspace / 'params.yaml'), seed=5) == EXIT_OK
    out = workspace / 'out'
    trajectory = read_csv(out / 'trajectory.csv')
    assert list(trajectory.columns) == ['t', 'bus', 'v', 'q', 'u', 'p', 'sat']
    assert len(trajectory) == 40
    meta = read_meta(out / 'trajectory.csv')
    assert meta['seed'] == '5'
    assert len(meta['config_hash']) == 64
    summary = yaml.safe_load((out / 'trajectory_summary.yaml').read_text(encoding='utf-8'))
    assert summary['config_hash'] == meta['config_hash']
    assert summary['total_cost'] > 0
    voltage = read_csv(out / 'plot_voltage.csv')
    assert list(voltage.columns) == ['t', 'adaptive_v_1', 'adaptive_v_2']
    assert len(voltage) == 21
    assert (out / 'plot_netload.csv').exists()


def test_simulate_no_plot_data(workspace):
    assert run(workspace, 'simulate', str(workspace / 'params.yaml'), '--no-plot-data') == EXIT_OK
    out = workspace / 'out'
    assert (out / 'trajectory.csv').exists()
    assert not (out / 'plot_voltage.csv').exists()
    assert not (out / 'plot_netload.csv').exists()


def test_simulate_two_parameter_files(workspace):
    linear = write_params(workspace, 'linear.yaml', controller='linear')
    assert run(workspace, 'simulate', str(workspace / 'params.yaml'), '--linear-params', str(linear)) == EXIT_OK
    out = workspace / 'out'
    assert (out / 'trajectory_adaptive.csv').exists()
    assert (out / 'trajectory_linear.csv').exists()
    assert 'linear_q_2' in read_csv(out / 'plot_reactive.csv').columns


def test_simulate_refuses_uncertified(workspace, capsys):
    bad = write_params(workspace, 'alpha_one.yaml', alpha=1.0)
    assert run(workspace, 'simulate', str(bad)) == EXIT_CONDITION
    assert '--allow-uncertified' in capsys.readouterr().out
    assert not (workspace / 'out' / 'trajectory.csv').exists()
    assert run(workspace, '--allow-uncertified', 'simulate', str(bad)) == EXIT_OK


def test_simulate_zero_horizon(workspace):
    assert run(workspace, 'simulate', str(workspace / 'params.yaml'), '--horizon', '0') == EXIT_OK
    trajectory = read_csv(workspace / 'out' / 'trajectory.csv')
    assert trajectory.empty
    assert list(trajectory.columns) == ['t', 'bus', 'v', 'q', 'u', 'p', 'sat']


def test_simulate_divergence_exit_code(workspace, capsys):
    unstable = workspace / 'unstable.yaml'
    save_params(unstable, make_params([-50.0, -50.0], A=[0.01, 0.01], alpha=0.5))
    assert run(workspace, '--allow-uncertified', 'simulate', str(unstable)) == EXIT_DIVERGED
    assert 'diverged' in capsys.readouterr().out


def test_simulate_clamped(workspace):
    tight = write_params(workspace, 'tight.yaml', u_max=np.array([0.001, 0.001]))
    assert run(workspace, 'simulate', str(tight), '--clamp') == EXIT_OK
    trajectory = read_csv(workspace / 'out' / 'trajectory.csv')
    assert trajectory['u'].abs().max() <= 0.001 + 1e-12
    assert trajectory['sat'].sum() > 0


def test_evaluate_identical_params(workspace):
    params = str(workspace / 'params.yaml')
    assert run(workspace, 'evaluate', params, params) == EXIT_OK
    summary = read_csv(workspace / 'out' / 'comparison_summary.csv')
    assert summary['ratio'].tolist() == [0.5, 1.0]
    np.testing.assert_array_equal(summary['improvement_pct'], 0.0)
    assert len(read_csv(workspace / 'out' / 'comparison_scenarios.csv')) == 4


def test_evaluate_notes_uncertified(workspace):
    bad = write_params(workspace, 'alpha_one.yaml', alpha=1.0, controller='linear')
    assert run(workspace, 'evaluate', str(workspace / 'params.yaml'), str(bad)) == EXIT_CONDITION
    assert run(workspace, '--allow-uncertified', 'evaluate', str(workspace / 'params.yaml'), str(bad)) == EXIT_OK
    comparison = yaml.safe_load((workspace / 'out' / 'comparison.yaml').read_text(encoding='utf-8'))
    assert comparison['notes'] == ['linear parameters are not certified']


def test_train_zero_epochs_writes_initial_params(workspace, two_bus_model):
    assert run(workspace, 'train', '--epochs', '0') == EXIT_OK
    params = load_params(workspace / 'out' / 'params_adaptive.yaml')
    np.testing.assert_allclose(params.k, gain_bounds(two_bus_model, 0.01).midpoint)
    assert params.alpha == pytest.approx(0.99)
    log = read_csv(workspace / 'out' / 'train_log_adaptive.csv')
    assert log.empty
    assert list(log.columns) == ['epoch', 'loss', 'grad_norm', 'min_margin', 'gain_margin', 'adaptation_margin',
                                 'params_hash']


def test_train_records_epochs(workspace):
    params_out = workspace / 'trained' / 'linear.yaml'
    db = workspace / 'registry.db'
    code = run(workspace, '--db', str(db), 'train', '--controller', 'linear', '--params-out', str(params_out))
    assert code == EXIT_OK
    assert load_params(params_out).controller == 'linear'
    log = read_csv(workspace / 'out' / 'train_log_linear.csv')
    assert log['epoch'].tolist() == [1, 2]
    session = get_session(init_db(str(db)))
    run_row = session.query(ExperimentRun).filter_by(command='train').one()
    assert run_row.status == 'success'
    assert session.query(TrainEpoch).filter_by(run_id=run_row.id).count() == 2
    trained = yaml.safe_load(params_out.read_text(encoding='utf-8'))
    assert trained['config_hash'] == run_row.config_hash


def test_gen_scenario_then_replay_trace(workspace):
    gen_out = workspace / 'gen'
    code = main(['--feeder', str(workspace / 'two_bus.txt'), '--config', str(workspace / 'experiment.yaml'),
                 '--out', str(gen_out), 'gen-scenario', '--horizon', '12'])
    assert code == EXIT_OK
    trace = read_trace_csv(gen_out / 'scenario_trace.csv')
    assert trace.shape == (13, 2)
    assert read_meta(gen_out / 'scenario_trace.csv')['seed'] == '3'

    replay = dict(CONFIG, scenario={'trace': str(gen_out / 'scenario_trace.csv'), 'horizon': 12,
                                    'basis': {'kind': 'exact'}})
    (workspace / 'experiment.yaml').write_text(yaml.safe_dump(replay), encoding='utf-8')
    assert run(workspace, 'simulate', str(workspace / 'params.yaml')) == EXIT_OK
    trajectory = read_csv(workspace / 'out' / 'trajectory.csv')
    np.testing.assert_allclose(trajectory['p'].to_numpy().reshape(12, 2), trace[1:], rtol=1e-11)


def test_status_lists_runs(workspace, capsys):
    db = workspace / 'registry.db'
    run(workspace, '--db', str(db), 'certify', str(workspace / 'params.yaml'))
    run(workspace, '--db', str(db), 'certify', str(workspace / 'missing.yaml'))
    capsys.readouterr()
    assert main(['--db', str(db), 'status']) == EXIT_OK
    out = capsys.readouterr().out
    assert 'VoltPilot Status' in out
    assert 'Runs: 2' in out
    assert 'certify [input-error]: 1' in out
    assert 'certify [success]: 1' in out
