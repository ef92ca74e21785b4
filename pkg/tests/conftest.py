"""Shared fixtures: tasks, canonical trajectories, and a stub protocol worker.

The stub worker speaks the sandbox's stdio protocol but applies no resource
limits; primary-component tests use it so they never depend on the real
worker package.
"""

from __future__ import annotations

import sys
import textwrap

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
)

STUB_WORKER_SOURCE = textwrap.dedent(
    """
    import contextlib, io, json, sys, traceback
    request = json.loads(sys.stdin.readline())
    out, err = io.StringIO(), io.StringIO()
    status = "ok"
    try:
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            exec(compile(request["program"], "<program>", "exec"), {"__name__": "__main__"})
    except BaseException:
        status = "runtime_error"
        err.write(traceback.format_exc())
    print(json.dumps({
        "status": status,
        "stdout": out.getvalue(),
        "stderr": err.getvalue(),
        "peak_memory_mb": 0.0,
    }))
    """
)

STUB_WORKER_CMD = (sys.executable, "-c", STUB_WORKER_SOURCE)

MINIMAL_SYSTEM_TEMPLATE = (
    "You answer questions about the data file at {data_source_path}. "
    "Reason in <think> tags, act in <code> or <answer> tags."
)


@pytest.fixture
def csv_task(tmp_path) -> AnalysisTask:
    path = tmp_path / "sales.csv"
    rows = ["region,amount"] + [f"r{i},{i * 10}" for i in range(30)]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return AnalysisTask(
        id="task-csv-1",
        query="What is the total amount across all regions?",
        file=DataFile(path=str(path), format="csv"),
        category=TaskCategory.AGGREGATION,
    )


def make_turn(thought: str, action, observation=None) -> TurnRecord:
    return TurnRecord(thought=thought, action=action, observation=observation)


@pytest.fixture
def answered_trajectory() -> Trajectory:
    turns = (
        make_turn(
            "inspect the data",
            Code(text="print(df.shape)"),
            observation="(30, 2)",
        ),
        make_turn(
            "sum the amount column",
            Code(text="print(df['amount'].sum())"),
            observation="4350",
        ),
        make_turn("the total is 4350", Answer(text="The total amount is 4350.")),
    )
    return Trajectory(
        task_id="task-csv-1",
        turns=turns,
        status=TrajectoryStatus.ANSWERED,
        final_answer="The total amount is 4350.",
    )
