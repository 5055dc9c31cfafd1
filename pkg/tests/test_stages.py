from datetime import datetime, timedelta

import pytest

from normdiff.stages import DB_FILE, STATUS_ERROR, Pipeline, Stage, StageRecord, StageTransition


class TestStage:
    def test_equality(self):
        """Test stages compare by name, also against plain strings."""
        assert Stage(name="train") == Stage(name="train")
        assert Stage(name="train") == "train"
        assert Stage(name="train") != 3
        assert len({Stage(name="eval"), Stage(name="eval")}) == 1
        assert str(Stage(name="eval")) == "eval"


class TestPipeline:
    def test_final(self, pipeline_graph):
        """Test report is the only terminal stage."""
        assert pipeline_graph.final == [Stage(name="report")]

    def test_transitions(self, pipeline_graph):
        """Test outgoing and incoming lookups."""
        assert [t.to_stage.name for t in pipeline_graph.get_transition("train")] == ["sample"]
        assert [t.from_stage.name for t in pipeline_graph.incoming("eval")] == ["sample"]

    def test_required_predecessors(self, pipeline_graph):
        """Test an optional edge does not make its source a requirement."""
        assert pipeline_graph.required_predecessors("train") == []
        assert pipeline_graph.required_predecessors("sample") == [Stage(name="train")]
        assert pipeline_graph.required_predecessors("synth") == []

    def test_unknown_stage(self, stages):
        """Test a transition to a stage outside the graph is rejected."""
        with pytest.raises(ValueError, match="unknown to_stage"):
            Pipeline(
                stages=stages[:2],
                transitions=[StageTransition(from_stage=stages[1], to_stage=Stage(name="plot"))],
            )


class TestRunStore:
    def _record(self, stage, offset=0, **kwargs):
        return StageRecord(
            run_id="store_run",
            stage=stage,
            started_at=datetime(2024, 1, 1) + timedelta(seconds=offset),
            **kwargs,
        )

    def test_initialize(self, run_store):
        """Test the database file lives in the run directory."""
        assert (run_store.run_dir / DB_FILE).exists()
        assert run_store.run_id == "store_run"

    def test_add_and_get(self, run_store):
        """Test a record comes back with its metadata."""
        record_id = run_store.add(self._record("train", metadata={"epochs": 3}))
        record = run_store.get(id=record_id)
        assert record.stage == "train"
        assert record.metadata == {"epochs": 3}
        assert record.ok
        assert run_store.get(id="missing") is None

    def test_list_in_start_order(self, run_store):
        """Test listing follows start time, not insertion order."""
        run_store.add(self._record("sample", offset=10))
        run_store.add(self._record("train", offset=5))
        assert [r.stage for r in run_store.list()] == ["train", "sample"]
        assert [r.stage for r in run_store.get(stage="sample")] == ["sample"]

    def test_latest(self, run_store):
        """Test the newest successful record is returned, failures skipped by default."""
        first = run_store.add(self._record("train", offset=1))
        run_store.add(self._record("train", offset=2, status=STATUS_ERROR))
        assert run_store.latest("train").id == first
        assert run_store.latest("train", status=None).status == STATUS_ERROR
        assert run_store.latest("eval") is None

    def test_count(self, run_store):
        """Test counting by stage and status."""
        run_store.add(self._record("train", offset=1))
        run_store.add(self._record("train", offset=2, status=STATUS_ERROR))
        run_store.add(self._record("eval", offset=3))
        assert run_store.count() == 3
        assert run_store.count(stage="train") == 2
        assert run_store.count(status=STATUS_ERROR) == 1

    def test_parent_link(self, run_store):
        """Test a record keeps the id of the record it consumed."""
        parent = run_store.add(self._record("train", offset=1))
        child = run_store.add(self._record("sample", offset=2, parent_id=parent))
        assert run_store.get(id=child).parent_id == parent

    def test_update(self, run_store):
        """Test metadata updates merge with existing fields."""
        record_id = run_store.add(self._record("sample", metadata={"m": 100}))
        updated = run_store.update(record_id, seconds=1.5)
        assert updated.metadata == {"m": 100, "seconds": 1.5}
        assert run_store.get(id=record_id).metadata == {"m": 100, "seconds": 1.5}

    def test_update_missing(self, run_store):
        """Test updating an unknown record fails."""
        with pytest.raises(ValueError, match="not found"):
            run_store.update("missing", seconds=1.0)
