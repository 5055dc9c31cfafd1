from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union
from uuid import uuid4

from pydantic import BaseModel, Field, model_validator
from sqlalchemy import create_engine, func, select
from sqlalchemy.orm import sessionmaker
from sqlalchemy_utils import create_database, database_exists

from normdiff.database import Base, StageRecordModel
from normdiff.utils import log_stage_operation, timed

STATUS_DONE = "done"
STATUS_ERROR = "error"
DB_FILE = "runs.db"


class Stage(BaseModel):
    """A named step of the pipeline."""

    name: str

    def __eq__(self, other):
        if isinstance(other, Stage):
            return self.name == other.name
        elif isinstance(other, str):
            return self.name == other
        return False

    def __hash__(self):
        return hash(self.name)

    def __str__(self) -> str:
        return self.name


class StageTransition(BaseModel):
    """
    Edge from a producing stage to the stage that consumes its outputs.

    A non-required edge means the consumer can also start from inputs supplied
    outside the run (e.g. training on an existing CSV instead of a synth stage).
    """

    from_stage: Stage
    to_stage: Stage
    required: bool = True


class Pipeline(BaseModel):
    """Stage graph of a run."""

    stages: List[Stage]
    transitions: List[StageTransition]

    @property
    def final(self) -> List[Stage]:
        """Stages with no outgoing transitions."""
        sources = {t.from_stage for t in self.transitions}
        return [stage for stage in self.stages if stage not in sources]

    def get_transition(self, from_stage: Union[Stage, str]) -> List[StageTransition]:
        name = from_stage if isinstance(from_stage, str) else from_stage.name
        return [t for t in self.transitions if t.from_stage.name == name]

    def incoming(self, to_stage: Union[Stage, str]) -> List[StageTransition]:
        name = to_stage if isinstance(to_stage, str) else to_stage.name
        return [t for t in self.transitions if t.to_stage.name == name]

    def required_predecessors(self, stage: Union[Stage, str]) -> List[Stage]:
        """Stages whose completed outputs must exist before ``stage`` can run."""
        return [t.from_stage for t in self.incoming(stage) if t.required]

    @model_validator(mode='after')
    def validate_states_and_transitions(self) -> 'Pipeline':
        """Validate that all stages referenced in transitions exist."""
        names = {stage.name for stage in self.stages}
        for transition in self.transitions:
            if transition.from_stage.name not in names:
                raise ValueError(f"Transition references unknown from_stage: {transition.from_stage.name}")
            if transition.to_stage.name not in names:
                raise ValueError(f"Transition references unknown to_stage: {transition.to_stage.name}")
        return self


class StageRecord(BaseModel):
    """Outcome of one stage execution."""

    id: str = Field(default_factory=lambda: str(uuid4()))
    run_id: str
    stage: str
    status: str = STATUS_DONE
    parent_id: Optional[str] = None
    started_at: datetime = Field(default_factory=datetime.now)
    duration_s: float = 0.0
    metadata: Dict[str, Any] = Field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == STATUS_DONE


class RunStore:
    """
    Repository of stage records kept in ``runs.db`` inside a run directory.

    The database file is created on :meth:`initialize` when missing.
    """

    ERROR_STATUS = STATUS_ERROR

    def __init__(self, run_dir: Union[str, Path], echo: bool = False):
        self.run_dir = Path(run_dir)
        self.run_id = self.run_dir.name
        self.connection_string = f"sqlite:///{(self.run_dir / DB_FILE).resolve()}"
        self.engine = create_engine(self.connection_string, echo=echo)
        self.session = sessionmaker(bind=self.engine, expire_on_commit=False, autoflush=False)

    def initialize(self) -> 'RunStore':
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if not database_exists(self.connection_string):
            create_database(self.connection_string)
            log_stage_operation(operation="create", run_id=self.run_id, details=DB_FILE)
        Base.metadata.create_all(self.engine)
        return self

    def __enter__(self) -> 'RunStore':
        return self.initialize()

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.dispose()

    def dispose(self) -> None:
        self.engine.dispose()

    @staticmethod
    def _to_record(row: StageRecordModel) -> StageRecord:
        return StageRecord.model_validate({
            "id": row.id,
            "run_id": row.run_id,
            "stage": row.stage,
            "status": row.status,
            "parent_id": row.parent_id,
            "started_at": row.started_at,
            "duration_s": row.duration_s,
            "metadata": row.cmetadata or {},
        })

    @timed()
    def add(self, record: StageRecord) -> str:
        with self.session() as session:
            with session.begin():
                session.add(StageRecordModel(
                    id=record.id,
                    run_id=record.run_id,
                    stage=record.stage,
                    status=record.status,
                    parent_id=record.parent_id,
                    started_at=record.started_at,
                    duration_s=record.duration_s,
                    cmetadata=record.metadata,
                ))
        log_stage_operation(
            operation="record", run_id=record.run_id, details=f"stage={record.stage} status={record.status}"
        )
        return record.id

    def get(self, id: Optional[str] = None, stage: Optional[str] = None) -> Union[StageRecord, List[StageRecord], None]:
        """One record by id, or all records (optionally of one stage) in start order."""
        with self.session() as session:
            if id:
                row = session.execute(select(StageRecordModel).filter_by(id=id)).scalars().first()
                return None if row is None else self._to_record(row)
            stmt = select(StageRecordModel).order_by(StageRecordModel.started_at)
            if stage:
                stmt = stmt.filter_by(stage=stage)
            return [self._to_record(row) for row in session.execute(stmt).scalars().all()]

    def list(self) -> List[StageRecord]:
        return self.get()

    def latest(self, stage: str, status: Optional[str] = STATUS_DONE) -> Optional[StageRecord]:
        with self.session() as session:
            stmt = select(StageRecordModel).filter_by(stage=stage)
            if status is not None:
                stmt = stmt.filter_by(status=status)
            stmt = stmt.order_by(StageRecordModel.started_at.desc())
            row = session.execute(stmt).scalars().first()
            return None if row is None else self._to_record(row)

    def count(self, stage: Optional[str] = None, status: Optional[str] = None) -> int:
        with self.session() as session:
            stmt = select(func.count()).select_from(StageRecordModel)
            if stage:
                stmt = stmt.where(StageRecordModel.stage == stage)
            if status:
                stmt = stmt.where(StageRecordModel.status == status)
            return int(session.execute(stmt).scalar_one())

    def update(self, id: str, **metadata: Any) -> StageRecord:
        """
        Merge keyword arguments into a record's metadata.

        Raises:
            ValueError: If the record does not exist.
        """
        with self.session() as session:
            with session.begin():
                row = session.execute(select(StageRecordModel).filter_by(id=id)).scalars().first()
                if row is None:
                    raise ValueError(f"Stage record {id} not found")
                current = dict(row.cmetadata or {})
                current.update(metadata)
                row.cmetadata = current
            log_stage_operation(operation="update", run_id=row.run_id, details=f"metadata fields: {', '.join(metadata)}")
            return self._to_record(row)
