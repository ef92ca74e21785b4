"""JSONL store behavior and bit-exact serialization round trips."""

from __future__ import annotations

import json

import pytest

from datasmith.curation import CurationOutcome, CurationRecord, JudgeVerdict, Stage
from datasmith.model import (
    AbortReason,
    AnalysisTask,
    Answer,
    Code,
    DataFile,
    Dialect,
    Provenance,
    TaskCategory,
    Trajectory,
    TrajectoryStatus,
    TurnRecord,
    Void,
)
from datasmith.objective import LossBatch, TrajectoryTokens, dapo_loss
from datasmith.store import (
    JsonlStore,
    StoreError,
    curation_from_payload,
    curation_to_payload,
    load_loss_batch,
    loss_batch_from_json,
    loss_batch_to_json,
    task_from_payload,
    task_to_payload,
    trajectory_from_payload,
    trajectory_to_payload,
)


def nasty_trajectory() -> Trajectory:
    """Unicode, odd whitespace, every action kind, raw text preserved."""
    turns = (
        TurnRecord(
            thought="check café -- naïve\ttabs\n newlines ",
            action=Code(text="print('中文')\n", dialect=Dialect.SCRIPT),
            observation="中文\n",
            raw="<think>x</think><code>```python\nprint('中文')\n```</code>",
        ),
        TurnRecord(thought=None, action=Void(), raw="no tags at all"),
        TurnRecord(
            thought="done",
            action=Answer(text="  answer with spaces  "),
            raw=None,
        ),
    )
    return Trajectory(
        task_id="t-ünicode",
        turns=turns,
        status=TrajectoryStatus.ANSWERED,
        final_answer="  answer with spaces  ",
        provenance=Provenance.REFLECTED,
    )


class TestTrajectorySerialization:
    def test_bit_exact_roundtrip(self):
        traj = nasty_trajectory()
        payload = trajectory_to_payload(traj)
        again = trajectory_from_payload(json.loads(json.dumps(payload, ensure_ascii=False)))
        assert again == traj

    def test_aborted_roundtrip(self):
        traj = Trajectory(
            task_id="t",
            turns=(),
            status=TrajectoryStatus.ABORTED,
            abort_reason=AbortReason.ENDPOINT_FAILURE,
        )
        assert trajectory_from_payload(trajectory_to_payload(traj)) == traj


class TestTaskSerialization:
    def test_roundtrip_all_fields(self):
        task = AnalysisTask(
            id="t1",
            query="How many rows?",
            file=DataFile(path="/data/x.sqlite", format="sqlite"),
            description="a table",
            gold_answer="42",
            category=TaskCategory.COUNTING,
            composition_depth=3,
        )
        assert task_from_payload(json.loads(json.dumps(task_to_payload(task)))) == task

    def test_roundtrip_minimal(self):
        task = AnalysisTask(id="t2", query="q", file=DataFile.from_path("a.csv"))
        assert task_from_payload(task_to_payload(task)) == task


class TestCurationSerialization:
    def test_roundtrip(self):
        record = CurationRecord(
            task_id="t",
            candidates=(nasty_trajectory(),),
            verdicts=(JudgeVerdict("because", True, 1),),
            outcome=CurationOutcome(kept=True, best_index=1),
        )
        payload = json.loads(json.dumps(curation_to_payload(record), ensure_ascii=False))
        assert curation_from_payload(payload) == record

    def test_dropped_roundtrip(self):
        record = CurationRecord(
            task_id="t",
            candidates=(),
            verdicts=(JudgeVerdict("r", False, 2),),
            outcome=CurationOutcome(kept=False, stage=Stage.CONSISTENCY, reason="inconsistent"),
        )
        assert curation_from_payload(curation_to_payload(record)) == record


class TestJsonlStore:
    def test_append_and_iterate(self, tmp_path):
        store = JsonlStore(tmp_path)
        store.append("task", "a", {"x": 1})
        store.append("task", "b", {"x": 2})
        records = list(store.iter_records("task"))
        assert records == [("a", {"x": 1}), ("b", {"x": 2})]
        assert store.ids("task") == {"a", "b"}
        assert store.count("task") == 2

    def test_unknown_kind_rejected(self, tmp_path):
        store = JsonlStore(tmp_path)
        with pytest.raises(StoreError):
            store.append("mystery", "a", {})

    def test_missing_file_iterates_empty(self, tmp_path):
        store = JsonlStore(tmp_path)
        assert list(store.iter_records("reward")) == []

    def test_corrupt_line_reported(self, tmp_path):
        store = JsonlStore(tmp_path)
        store.append("task", "a", {})
        (tmp_path / "task.jsonl").open("a").write("not json\n")
        with pytest.raises(StoreError):
            list(store.iter_records("task"))

    def test_append_only_preserves_existing(self, tmp_path):
        store = JsonlStore(tmp_path)
        store.append("task", "a", {"x": 1})
        before = (tmp_path / "task.jsonl").read_text()
        store.append("task", "b", {"x": 2})
        after = (tmp_path / "task.jsonl").read_text()
        assert after.startswith(before)

    def test_stored_trajectory_roundtrips_bytes(self, tmp_path):
        store = JsonlStore(tmp_path)
        traj = nasty_trajectory()
        store.append("trajectory", "t1", trajectory_to_payload(traj))
        [(record_id, payload)] = list(store.iter_records("trajectory"))
        assert record_id == "t1"
        assert trajectory_from_payload(payload) == traj


class TestLossBatchFile:
    def test_roundtrip_and_compute(self, tmp_path):
        batch = LossBatch(
            trajectories=(
                TrajectoryTokens((-0.1, -0.3), (-0.1, -0.3), (True, True), "g", 1.0),
                TrajectoryTokens((-0.2,), (-0.2,), (True,), "g", 0.0),
            )
        )
        data = loss_batch_to_json(batch)
        path = tmp_path / "batch.json"
        path.write_text(json.dumps(data))
        loaded = load_loss_batch(path)
        assert loaded == batch
        assert dapo_loss(loaded) == pytest.approx(dapo_loss(batch))

    def test_malformed_rejected(self):
        with pytest.raises(StoreError):
            loss_batch_from_json({"trajectories": [{"group": "g"}]})
