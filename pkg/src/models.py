"""Database models for the VoltPilot run registry"""
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np
from sqlalchemy import create_engine, Column, Integer, String, DateTime, Float, Text, ForeignKey
from sqlalchemy.orm import declarative_base, sessionmaker, relationship

logger = logging.getLogger(__name__)

Base = declarative_base()


class ExperimentRun(Base):
    """One CLI invocation"""
    __tablename__ = 'experiment_runs'

    id = Column(Integer, primary_key=True)
    command = Column(String, nullable=False)  # certify, simulate, train, evaluate, gen-scenario
    config_hash = Column(String)
    seed = Column(Integer)
    feeder = Column(String)  # feeder file path
    status = Column(String, default='running')  # running, success, failed, input-error, diverged
    exit_code = Column(Integer)
    summary = Column(Text)  # JSON
    created_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    # Relationships
    epochs = relationship("TrainEpoch", back_populates="run", order_by="TrainEpoch.epoch")

    def summary_dict(self) -> dict:
        return json.loads(self.summary) if self.summary else {}


class TrainEpoch(Base):
    """Per-epoch training record"""
    __tablename__ = 'train_epochs'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('experiment_runs.id'), nullable=False)
    epoch = Column(Integer, nullable=False)
    loss = Column(Float)
    grad_norm = Column(Float)
    min_margin = Column(Float)
    gain_margin = Column(Float)
    adaptation_margin = Column(Float, nullable=True)  # NULL for linear controllers
    params_hash = Column(String)

    # Relationships
    run = relationship("ExperimentRun", back_populates="epochs")


class SystemMetadata(Base):
    """System-level metadata and tracking"""
    __tablename__ = 'system_metadata'

    id = Column(Integer, primary_key=True)
    key = Column(String, unique=True, nullable=False)
    value = Column(String)
    updated_at = Column(DateTime, default=datetime.utcnow, onupdate=datetime.utcnow)


STATUS_BY_EXIT = {0: 'success', 1: 'failed', 2: 'input-error', 3: 'diverged'}


def init_db(db_path='out/voltpilot.db'):
    """Initialize database"""
    Path(db_path).resolve().parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(f'sqlite:///{db_path}', connect_args={'check_same_thread': False})
    Base.metadata.create_all(engine)
    return engine


def get_session(engine):
    """Get database session"""
    Session = sessionmaker(bind=engine)
    return Session()


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return str(value)


def set_metadata(db_session, key: str, value: str):
    metadata = db_session.query(SystemMetadata).filter_by(key=key).first()
    if metadata:
        metadata.value = value
        metadata.updated_at = datetime.utcnow()
    else:
        metadata = SystemMetadata(key=key, value=value)
        db_session.add(metadata)


def start_run(db_session, command: str, config_hash: str, seed: int, feeder: Optional[str]) -> ExperimentRun:
    run = ExperimentRun(command=command, config_hash=config_hash, seed=int(seed), feeder=feeder)
    db_session.add(run)
    db_session.commit()
    return run


def finish_run(db_session, run: ExperimentRun, exit_code: int, summary: Optional[dict] = None):
    """Close a run and stamp last_<command> in the metadata table"""
    run.exit_code = exit_code
    run.status = STATUS_BY_EXIT.get(exit_code, 'failed')
    run.summary = json.dumps(summary or {}, sort_keys=True, default=_json_default)
    run.finished_at = datetime.utcnow()
    set_metadata(db_session, f"last_{run.command}", run.finished_at.isoformat())
    db_session.commit()
    logger.debug(f"run {run.id} ({run.command}) finished with exit code {exit_code}")


def _optional_float(value) -> Optional[float]:
    if value is None or np.isnan(value):
        return None
    return float(value)


def record_epochs(db_session, run: ExperimentRun, log_frame):
    """Store TrainLog rows; margin columns missing from the frame are left NULL"""
    for row in log_frame.itertuples(index=False):
        db_session.add(TrainEpoch(
            run_id=run.id,
            epoch=int(row.epoch),
            loss=float(row.loss),
            grad_norm=float(row.grad_norm),
            min_margin=_optional_float(row.min_margin),
            gain_margin=_optional_float(getattr(row, 'gain_margin', None)),
            adaptation_margin=_optional_float(getattr(row, 'adaptation_margin', None)),
            params_hash=row.params_hash,
        ))
    db_session.commit()


def registry_status(db_session, limit: int = 5) -> dict:
    """Run counts per command and status, plus the most recent runs"""
    runs = db_session.query(ExperimentRun).all()
    counts = {}
    for run in runs:
        key = (run.command, run.status)
        counts[key] = counts.get(key, 0) + 1
    recent = (db_session.query(ExperimentRun)
              .order_by(ExperimentRun.created_at.desc(), ExperimentRun.id.desc())
              .limit(limit).all())
    metadata = {m.key: m.value for m in db_session.query(SystemMetadata).all()}
    return {'total': len(runs), 'counts': counts, 'recent': recent, 'metadata': metadata}
