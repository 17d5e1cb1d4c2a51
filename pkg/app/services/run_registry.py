"""Best-effort bookkeeping of runs in the SQL registry.

Output files under the run directory are the reproducible artifacts; a
registry failure is logged and never aborts a run.
"""

import logging
from datetime import datetime
from typing import Dict, Iterable, Optional

from sqlalchemy.orm import Session

from app.config import get_settings
from app.database import SessionLocal, init_db
from app.models import EpochRecord, StreamVerdict, TrainingRun

logger = logging.getLogger(__name__)


def open_session() -> Optional[Session]:
    settings = get_settings()
    if not settings.record_runs or not settings.database_url:
        return None
    try:
        init_db()
        return SessionLocal()
    except Exception as e:
        logger.error(f"❌ Run registry unavailable: {e}", exc_info=True)
        return None


def start_run(db: Optional[Session], command: str, config_hash: str, seed: int, out_dir: str,
              alpha: Optional[float] = None) -> Optional[int]:
    if db is None:
        return None
    try:
        run = TrainingRun(command=command, config_hash=config_hash, seed=seed, out_dir=out_dir, alpha=alpha)
        db.add(run)
        db.commit()
        db.refresh(run)
        return run.id
    except Exception as e:
        db.rollback()
        logger.error(f"Error recording run start: {e}", exc_info=True)
        return None


def record_epochs(db: Optional[Session], run_id: Optional[int], rows: Iterable[Dict]) -> None:
    if db is None or run_id is None:
        return
    try:
        for row in rows:
            db.add(EpochRecord(
                run_id=run_id,
                epoch=row["epoch"],
                classes=row["classes"],
                k_active=row["k_active"],
                elbo=row["elbo"],
                objective=row["objective"],
                bound=row["bound"],
                dda=row["dda"],
                acc=row["acc"],
                ari=row["ari"],
                nmi=row["nmi"],
            ))
        db.commit()
    except Exception as e:
        db.rollback()
        logger.error(f"Error recording epoch trace: {e}", exc_info=True)


def record_verdicts(db: Optional[Session], run_id: Optional[int], batch: str, rows: Iterable[Dict]) -> None:
    if db is None or run_id is None:
        return
    try:
        for row in rows:
            db.add(StreamVerdict(
                run_id=run_id, batch=batch, sample_id=row["sample_id"], cluster=row["cluster"],
                tail_mass=row["tail_mass"], anomaly=bool(row["anomaly"]),
            ))
        db.commit()
    except Exception as e:
        db.rollback()
        logger.error(f"Error recording stream verdicts: {e}", exc_info=True)


def finish_run(db: Optional[Session], run_id: Optional[int], scores: Optional[Dict[str, float]] = None,
               k_active: Optional[int] = None, error: Optional[str] = None) -> None:
    if db is None or run_id is None:
        return
    try:
        run = db.query(TrainingRun).filter(TrainingRun.id == run_id).first()
        if run is None:
            return
        run.status = "failed" if error else "finished"
        run.error = error
        run.finished_at = datetime.utcnow()
        run.k_active = k_active
        for key, value in (scores or {}).items():
            if key in ("dda", "acc", "ari", "nmi"):
                setattr(run, key, value)
        db.commit()
    except Exception as e:
        db.rollback()
        logger.error(f"Error recording run result: {e}", exc_info=True)
