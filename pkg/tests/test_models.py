"""Tests for the run registry"""
import pandas as pd

from src.models import (ExperimentRun, SystemMetadata, TrainEpoch, finish_run, get_session, init_db, record_epochs,
                        registry_status, set_metadata, start_run)


def open_session(tmp_path):
    return get_session(init_db(str(tmp_path / 'registry' / 'voltpilot.db')))


def test_init_db_creates_parent_directory(tmp_path):
    open_session(tmp_path)
    assert (tmp_path / 'registry' / 'voltpilot.db').exists()


def test_run_lifecycle(tmp_path):
    session = open_session(tmp_path)
    run = start_run(session, 'certify', 'abc123', 7, 'data/ieee33.txt')
    assert run.id is not None
    assert run.status == 'running'
    finish_run(session, run, 1, {'passed': False, 'failed': ['condition_b']})
    stored = session.query(ExperimentRun).one()
    assert stored.status == 'failed'
    assert stored.exit_code == 1
    assert stored.finished_at is not None
    assert stored.summary_dict() == {'passed': False, 'failed': ['condition_b']}
    assert session.query(SystemMetadata).filter_by(key='last_certify').one().value == stored.finished_at.isoformat()


def test_exit_codes_map_to_status(tmp_path):
    session = open_session(tmp_path)
    for code, status in [(0, 'success'), (2, 'input-error'), (3, 'diverged'), (9, 'failed')]:
        run = start_run(session, 'simulate', 'h', 0, None)
        finish_run(session, run, code)
        assert run.status == status
        assert run.summary_dict() == {}


def test_record_epochs(tmp_path):
    session = open_session(tmp_path)
    run = start_run(session, 'train', 'h', 1, None)
    frame = pd.DataFrame({'epoch': [1, 2], 'loss': [3.0, 2.5], 'grad_norm': [0.4, 0.3],
                          'min_margin': [0.01, 0.02], 'params_hash': ['aa', 'bb']})
    record_epochs(session, run, frame)
    assert [epoch.loss for epoch in run.epochs] == [3.0, 2.5]
    assert session.query(TrainEpoch).filter_by(epoch=2).one().params_hash == 'bb'
    assert run.epochs[0].gain_margin is None


def test_record_epochs_stores_margins(tmp_path):
    session = open_session(tmp_path)
    run = start_run(session, 'train', 'h', 1, None)
    frame = pd.DataFrame({'epoch': [1], 'loss': [3.0], 'grad_norm': [0.4], 'min_margin': [0.02],
                          'gain_margin': [0.02], 'adaptation_margin': [float('nan')], 'params_hash': ['aa']})
    record_epochs(session, run, frame)
    epoch = session.query(TrainEpoch).one()
    assert epoch.gain_margin == 0.02
    assert epoch.adaptation_margin is None


def test_set_metadata_upserts(tmp_path):
    session = open_session(tmp_path)
    set_metadata(session, 'feeder', 'ieee33')
    session.commit()
    set_metadata(session, 'feeder', 'two-bus')
    session.commit()
    rows = session.query(SystemMetadata).filter_by(key='feeder').all()
    assert [row.value for row in rows] == ['two-bus']


def test_registry_status(tmp_path):
    session = open_session(tmp_path)
    for command, code in [('certify', 0), ('certify', 1), ('train', 0), ('certify', 0)]:
        finish_run(session, start_run(session, command, 'h', 0, None), code)
    status = registry_status(session, limit=2)
    assert status['total'] == 4
    assert status['counts'][('certify', 'success')] == 2
    assert status['counts'][('certify', 'failed')] == 1
    assert len(status['recent']) == 2
    assert status['recent'][0].command == 'certify'
    assert set(status['metadata']) == {'last_certify', 'last_train'}
