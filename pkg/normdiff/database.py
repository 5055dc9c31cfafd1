from sqlalchemy import JSON, Column, DateTime, Float, ForeignKey, Index, String
from sqlalchemy.orm import DeclarativeBase, backref, relationship


class Base(DeclarativeBase):
    """Base class for all SQLAlchemy models."""
    pass


class StageRecordModel(Base):
    """
    One execution of a pipeline stage inside a run directory.

    A record points at the record of the stage it consumed (``parent_id``),
    so the chain synth -> train -> sample -> eval -> report can be walked.
    """

    __tablename__ = "stage_records"

    id = Column(String, primary_key=True)
    run_id = Column(String, nullable=False, index=True)
    stage = Column(String, nullable=False, index=True)
    status = Column(String, nullable=False, index=True)
    parent_id = Column(String, ForeignKey("stage_records.id"), nullable=True, index=True)
    started_at = Column(DateTime, nullable=False)
    duration_s = Column(Float, nullable=False, default=0.0)

    children = relationship(
        "StageRecordModel",
        backref=backref("parent", remote_side=[id], lazy='selectin'),
        lazy='selectin',
    )

    cmetadata = Column(JSON, nullable=False, default={})

    __table_args__ = (
        Index('idx_run_stage', 'run_id', 'stage'),
        Index('idx_stage_status', 'stage', 'status'),
    )
