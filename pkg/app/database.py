from typing import Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker

from app.config import get_settings

SessionLocal = sessionmaker(autocommit=False, autoflush=False)

Base = declarative_base()

_engine: Optional[Engine] = None


def get_engine(database_url: Optional[str] = None) -> Engine:
    """Create (once) the run-registry engine and bind SessionLocal to it."""
    global _engine
    if _engine is not None and database_url is None:
        return _engine
    url = database_url or get_settings().database_url
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    _engine = create_engine(url, connect_args=connect_args, pool_pre_ping=True)
    SessionLocal.configure(bind=_engine)
    return _engine


def init_db(database_url: Optional[str] = None):
    Base.metadata.create_all(bind=get_engine(database_url))
