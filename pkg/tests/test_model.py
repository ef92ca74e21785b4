"""Domain type invariants, history prefixes and trajectory validation."""

from __future__ import annotations

import pytest

from datasmith.model import (
    AnalysisTask,
    Answer,
    Code,
    DataFile,
    TaskCategory,
    Trajectory,
    TrajectoryStatus,
    TurnRecord,
    Void,
    history_at,
    validate_trajectory,
)


class TestTaskCategory:
    def test_exactly_eighteen(self):
        assert len(TaskCategory) == 18

    def test_from_label_roundtrip(self):
        for category in TaskCategory:
            assert TaskCategory.from_label(category.value) is category

    def test_from_label_tolerant(self):
        assert TaskCategory.from_label(" multi-hop numerical  reasoning ") is (
            TaskCategory.MULTI_HOP_NUMERICAL_REASONING
        )

    def test_unknown_label_rejected(self):
        with pytest.raises(ValueError):
            TaskCategory.from_label("Clustering")


class TestDataFile:
    def test_format_must_match_extension(self):
        with pytest.raises(ValueError):
            DataFile(path="data.csv", format="xlsx")

    def test_from_path_infers(self):
        assert DataFile.from_path("x/y.sqlite").format == "sqlite"

    def test_unknown_extension_rejected(self):
        with pytest.raises(ValueError):
            DataFile.from_path("notes.txt")


class TestAnalysisTask:
    def test_empty_query_rejected(self):
        with pytest.raises(ValueError):
            AnalysisTask(id="t", query="  ", file=DataFile.from_path("a.csv"))

    def test_composition_depth_bounds(self):
        for bad in (0, 6):
            with pytest.raises(ValueError):
                AnalysisTask(
                    id="t", query="q", file=DataFile.from_path("a.csv"), composition_depth=bad
                )
        AnalysisTask(id="t", query="q", file=DataFile.from_path("a.csv"), composition_depth=5)


class TestTurnRecord:
    def test_answer_turns_carry_no_observation(self):
        with pytest.raises(ValueError):
            TurnRecord(thought="t", action=Answer(text="a"), observation="x")

    def test_void_turns_carry_no_observation(self):
        with pytest.raises(ValueError):
            TurnRecord(thought="t", action=Void(), observation="x")


class TestHistoryAt:
    def test_zero_prefix_is_task_only(self, answered_trajectory):
        history = history_at(answered_trajectory, 0)
        assert history.task_id == answered_trajectory.task_id
        assert history.turns == ()

    def test_two_turn_prefix_by_hand(self):
        turn0 = TurnRecord(thought="a", action=Code(text="print(1)"), observation="1")
        turn1 = TurnRecord(thought="b", action=Answer(text="done"))
        traj = Trajectory(
            task_id="t",
            turns=(turn0, turn1),
            status=TrajectoryStatus.ANSWERED,
            final_answer="done",
        )
        assert history_at(traj, 1).turns == (turn0,)

    def test_full_history(self, answered_trajectory):
        full = history_at(answered_trajectory, len(answered_trajectory.turns))
        assert full.turns == answered_trajectory.turns

    def test_prefix_chain(self, answered_trajectory):
        for t in range(len(answered_trajectory.turns)):
            shorter = history_at(answered_trajectory, t).turns
            longer = history_at(answered_trajectory, t + 1).turns
            assert longer[: len(shorter)] == shorter

    def test_out_of_range(self, answered_trajectory):
        with pytest.raises(IndexError):
            history_at(answered_trajectory, len(answered_trajectory.turns) + 1)
        with pytest.raises(IndexError):
            history_at(answered_trajectory, -1)


class TestValidateTrajectory:
    def test_well_formed_fixture_is_clean(self, answered_trajectory):
        assert validate_trajectory(answered_trajectory) == []

    def test_non_terminal_answer(self):
        traj = Trajectory(
            task_id="t",
            turns=(
                TurnRecord(thought="x", action=Answer(text="early")),
                TurnRecord(thought="y", action=Code(text="print(1)"), observation="1"),
            ),
            status=TrajectoryStatus.MAX_ROUNDS_EXCEEDED,
        )
        violations = validate_trajectory(traj)
        assert any("non-terminal answer" in v for v in violations)

    def test_answered_requires_final_answer(self):
        traj = Trajectory(
            task_id="t",
            turns=(TurnRecord(thought="x", action=Answer(text="a")),),
            status=TrajectoryStatus.ANSWERED,
            final_answer=None,
        )
        violations = validate_trajectory(traj)
        assert any("final_answer absent" in v for v in violations)

    def test_observation_requires_code_action(self):
        # construct the breach via a surrogate: observation on a code turn is
        # fine, so validate flags only status-level issues here
        traj = Trajectory(
            task_id="t",
            turns=(TurnRecord(thought="x", action=Code(text="1"), observation="ok"),),
            status=TrajectoryStatus.ANSWERED,
            final_answer="a",
        )
        violations = validate_trajectory(traj)
        assert any("final turn is not an answer" in v for v in violations)

    def test_answer_mismatch_flagged(self):
        traj = Trajectory(
            task_id="t",
            turns=(TurnRecord(thought="x", action=Answer(text="a")),),
            status=TrajectoryStatus.ANSWERED,
            final_answer="b",
        )
        violations = validate_trajectory(traj)
        assert any("differs" in v for v in violations)

    def test_idempotent_and_pure(self, answered_trajectory):
        first = validate_trajectory(answered_trajectory)
        second = validate_trajectory(answered_trajectory)
        assert first == second == []

    def test_aborted_requires_reason(self):
        with pytest.raises(ValueError):
            Trajectory(task_id="t", turns=(), status=TrajectoryStatus.ABORTED)
