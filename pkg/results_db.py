"""
Run ledger: every pipeline run, grid-search row and predictor timing is
recorded in a SQL database (SQLite by default, any SQLAlchemy URL through
DATABASE_URL).
"""

import logging
import time
from datetime import datetime, timezone
from functools import wraps

import sqlalchemy.exc
from sqlalchemy import (Boolean, Column, DateTime, Float, ForeignKey, Integer, String, create_engine,
                        inspect, text)
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

Base = declarative_base()

_engines = {}
_sessions = {}


def _now():
    return datetime.now(timezone.utc)


def database_retry(max_retries=3, delay=1):
    """Retry a ledger operation on connection failures, backing off between attempts"""
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            for attempt in range(max_retries):
                try:
                    return func(*args, **kwargs)
                except (sqlalchemy.exc.OperationalError, sqlalchemy.exc.DisconnectionError) as e:
                    if attempt < max_retries - 1:
                        logger.warning("database connection error (attempt %d/%d): %s",
                                       attempt + 1, max_retries, e)
                        time.sleep(delay * (attempt + 1))
                        for engine in _engines.values():
                            engine.dispose()
                    else:
                        logger.error("database operation failed after %d attempts", max_retries)
                        raise
            return None
        return wrapper
    return decorator


class PipelineRun(Base):
    __tablename__ = 'pipeline_run'

    id = Column(Integer, primary_key=True)
    config_hash = Column(String(64), nullable=False)
    seed = Column(Integer, nullable=False)
    status = Column(String(20), nullable=False, default='running')  # 'running', 'ok', 'failed'
    failed_stage = Column(String(40), nullable=True)
    started_at = Column(DateTime, nullable=False, default=_now)
    finished_at = Column(DateTime, nullable=True)
    manifest_path = Column(String(500), nullable=True)


class FlowGridRow(Base):
    __tablename__ = 'flow_grid_row'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('pipeline_run.id'), nullable=True)
    sigma_init = Column(Float, nullable=False)
    sigma_sub = Column(Float, nullable=False)
    sigma_lk = Column(Float, nullable=False)
    n_layers = Column(Integer, nullable=False)
    n_iter = Column(Integer, nullable=False)
    e_dvf = Column(Float, nullable=True)
    valid = Column(Boolean, default=True)


class RnnGridRow(Base):
    __tablename__ = 'rnn_grid_row'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('pipeline_run.id'), nullable=True)
    theta = Column(Float, nullable=False)
    eta = Column(Float, nullable=False)
    sigma_init = Column(Float, nullable=False)
    L = Column(Integer, nullable=False)
    q = Column(Integer, nullable=False)
    mae_mm = Column(Float, nullable=True)
    n_failed = Column(Integer, default=0)
    valid = Column(Boolean, default=True)


class PredictorTiming(Base):
    __tablename__ = 'predictor_timing'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('pipeline_run.id'), nullable=True)
    predictor = Column(String(40), nullable=False)
    step_time_ms = Column(Float, nullable=True)
    recorded_at = Column(DateTime, nullable=False, default=_now)


def get_session(url):
    if url not in _sessions:
        _engines[url] = create_engine(url, pool_pre_ping=True, future=True)
        _sessions[url] = sessionmaker(bind=_engines[url], future=True)
    return _sessions[url]()


@database_retry()
def init_db(url):
    """Create the ledger tables that do not exist yet"""
    session = get_session(url)
    try:
        Base.metadata.create_all(session.get_bind())
    finally:
        session.close()
    logger.info("run ledger ready at %s", url)


@database_retry()
def update_database(url):
    """Add columns that older ledgers are missing"""
    session = get_session(url)
    added = []
    try:
        inspector = inspect(session.get_bind())
        for table in Base.metadata.sorted_tables:
            if not inspector.has_table(table.name):
                continue
            present = {col['name'] for col in inspector.get_columns(table.name)}
            for column in table.columns:
                if column.name in present:
                    continue
                col_type = column.type.compile(dialect=session.get_bind().dialect)
                session.execute(text(f"ALTER TABLE {table.name} ADD COLUMN {column.name} {col_type}"))
                added.append(f"{table.name}.{column.name}")
        session.commit()
    finally:
        session.close()
    if added:
        logger.info("added ledger columns: %s", ', '.join(added))
    return added


@database_retry()
def record_run_start(url, config_hash, seed):
    session = get_session(url)
    try:
        run = PipelineRun(config_hash=config_hash, seed=seed, status='running')
        session.add(run)
        session.commit()
        return run.id
    finally:
        session.close()


@database_retry()
def record_run_finish(url, run_id, status, manifest_path=None, failed_stage=None):
    session = get_session(url)
    try:
        run = session.get(PipelineRun, run_id)
        if run is None:
            raise KeyError(f"no pipeline run with id {run_id}")
        run.status = status
        run.failed_stage = failed_stage
        run.manifest_path = manifest_path
        run.finished_at = _now()
        session.commit()
    finally:
        session.close()


def _bulk(url, model, records):
    session = get_session(url)
    try:
        session.add_all([model(**record) for record in records])
        session.commit()
        return len(records)
    finally:
        session.close()


def _grid_records(table, columns, run_id):
    records = []
    for row in table.to_dict(orient='records'):
        record = {}
        for name in columns:
            value = row[name]
            value = value.item() if hasattr(value, 'item') else value
            # NaN errors are stored as NULL
            record[name] = None if isinstance(value, float) and value != value else value
        record['run_id'] = run_id
        records.append(record)
    return records


@database_retry()
def record_flow_grid(url, table, run_id=None):
    columns = ['sigma_init', 'sigma_sub', 'sigma_lk', 'n_layers', 'n_iter', 'e_dvf', 'valid']
    return _bulk(url, FlowGridRow, _grid_records(table, columns, run_id))


@database_retry()
def record_rnn_grid(url, table, run_id=None):
    columns = ['theta', 'eta', 'sigma_init', 'L', 'q', 'mae_mm', 'n_failed', 'valid']
    return _bulk(url, RnnGridRow, _grid_records(table, columns, run_id))


@database_retry()
def record_timings(url, comparison, run_id=None):
    records = [{'predictor': row['predictor'], 'run_id': run_id,
                'step_time_ms': None if row['step_time_ms'] != row['step_time_ms'] else float(row['step_time_ms'])}
               for row in comparison.to_dict(orient='records')]
    return _bulk(url, PredictorTiming, records)


@database_retry()
def run_summary(url, limit=10):
    """Most recent pipeline runs as plain dicts"""
    session = get_session(url)
    try:
        runs = session.query(PipelineRun).order_by(PipelineRun.id.desc()).limit(limit).all()
        return [{'id': run.id, 'status': run.status, 'seed': run.seed, 'config_hash': run.config_hash,
                 'failed_stage': run.failed_stage, 'started_at': run.started_at,
                 'finished_at': run.finished_at, 'manifest_path': run.manifest_path} for run in runs]
    finally:
        session.close()
