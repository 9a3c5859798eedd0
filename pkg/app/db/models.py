"""
SQLAlchemy run registry for PromptReID.
"""

from contextlib import contextmanager
from datetime import datetime
from typing import Generator, List, Optional

from sqlalchemy import JSON, DateTime, Engine, Integer, String, Text, create_engine, select
from sqlalchemy.orm import DeclarativeBase, Mapped, Session, mapped_column
from sqlalchemy.pool import QueuePool

from app.utils.logger import get_logger

logger = get_logger(__name__)


class Base(DeclarativeBase):
    """Base class for all database models."""
    pass


# Global engine cache for connection pooling
_engine_cache: dict = {}


class TrainingRun(Base):
    """One CLI invocation and its outcome."""

    __tablename__ = "training_runs"

    id: Mapped[str] = mapped_column(String(50), primary_key=True)
    command: Mapped[str] = mapped_column(String(32), nullable=False)
    status: Mapped[str] = mapped_column(String(20), nullable=False, default="pending")
    stage: Mapped[Optional[str]] = mapped_column(String(16), nullable=True)
    seed: Mapped[int] = mapped_column(Integer, nullable=False)
    run_dir: Mapped[str] = mapped_column(String(1024), nullable=False)
    config: Mapped[Optional[dict]] = mapped_column(JSON, nullable=True)
    metrics: Mapped[Optional[dict]] = mapped_column(JSON, nullable=True)
    error: Mapped[Optional[str]] = mapped_column(Text, nullable=True)
    created_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)
    completed_at: Mapped[Optional[datetime]] = mapped_column(DateTime, nullable=True)


def get_engine(database_url: str) -> Engine:
    """Registry engine for a URL, created once per process."""
    engine = _engine_cache.get(database_url)
    if engine is None:
        if database_url.startswith("sqlite"):
            engine = create_engine(database_url, connect_args={"check_same_thread": False})
        else:
            engine = create_engine(database_url, poolclass=QueuePool, pool_size=2, pool_pre_ping=True)
        _engine_cache[database_url] = engine
    return engine


def init_db(database_url: str) -> None:
    """
    Create all tables.

    Args:
        database_url: SQLAlchemy database URL
    """
    Base.metadata.create_all(get_engine(database_url))


@contextmanager
def get_session_context(database_url: str) -> Generator[Session, None, None]:
    """
    Session that commits on success and rolls back on error.

    Args:
        database_url: SQLAlchemy database URL

    Yields:
        Database session
    """
    session = Session(get_engine(database_url))
    try:
        yield session
        session.commit()
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


def record_run_start(
    database_url: str,
    run_id: str,
    command: str,
    seed: int,
    run_dir: str,
    config: dict,
    stage: Optional[str] = None,
) -> None:
    """Insert a run in status running."""
    with get_session_context(database_url) as db:
        db.add(
            TrainingRun(
                id=run_id,
                command=command,
                status="running",
                stage=stage,
                seed=seed,
                run_dir=run_dir,
                config=config,
            )
        )


def record_run_end(
    database_url: str,
    run_id: str,
    status: str,
    metrics: Optional[dict] = None,
    error: Optional[str] = None,
) -> None:
    """Mark a run completed or failed."""
    with get_session_context(database_url) as db:
        run = db.get(TrainingRun, run_id)
        if run is None:
            logger.warning("run_not_registered", run_id=run_id)
            return
        run.status = status
        run.metrics = metrics
        run.error = error
        run.completed_at = datetime.utcnow()


def list_runs(database_url: str, command: Optional[str] = None) -> List[TrainingRun]:
    """Registered runs, newest first."""
    with get_session_context(database_url) as db:
        query = select(TrainingRun).order_by(TrainingRun.created_at.desc())
        if command is not None:
            query = query.where(TrainingRun.command == command)
        runs = list(db.scalars(query))
        db.expunge_all()
        return runs
