from datetime import datetime

from sqlalchemy import Boolean, Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import relationship

from app.database import Base


class TrainingRun(Base):
    __tablename__ = "training_runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, index=True)  # train / stream / eval / sensitivity
    config_hash = Column(String, index=True)
    seed = Column(Integer)
    alpha = Column(Float, nullable=True)
    out_dir = Column(String)
    status = Column(String, default="running")  # running / finished / failed
    error = Column(Text, nullable=True)

    # Final held-out scores
    dda = Column(Float, nullable=True)
    acc = Column(Float, nullable=True)
    ari = Column(Float, nullable=True)
    nmi = Column(Float, nullable=True)
    k_active = Column(Integer, nullable=True)

    created_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    epochs = relationship("EpochRecord", back_populates="run", cascade="all, delete-orphan")
    verdicts = relationship("StreamVerdict", back_populates="run", cascade="all, delete-orphan")


class EpochRecord(Base):
    __tablename__ = "epoch_records"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("training_runs.id"), index=True)
    epoch = Column(Integer)
    classes = Column(String)  # comma-separated labels observed so far
    k_active = Column(Integer)
    elbo = Column(Float)
    objective = Column(Float)
    bound = Column(Float)
    dda = Column(Float)
    acc = Column(Float)
    ari = Column(Float)
    nmi = Column(Float)
    created_at = Column(DateTime, default=datetime.utcnow)

    run = relationship("TrainingRun", back_populates="epochs")


class StreamVerdict(Base):
    __tablename__ = "stream_verdicts"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("training_runs.id"), index=True)
    batch = Column(String)
    sample_id = Column(Integer)
    cluster = Column(Integer)
    tail_mass = Column(Float)
    anomaly = Column(Boolean)
    created_at = Column(DateTime, default=datetime.utcnow)

    run = relationship("TrainingRun", back_populates="verdicts")
