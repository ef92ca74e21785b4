"""Append-only JSONL persistence and serialization for every pipeline type.

One record per line: ``{"kind", "schema_version", "id", "payload"}``. Files
are named ``<kind>.jsonl`` under the store root. Records are never rewritten;
idempotence comes from deterministic record ids that commands check before
appending. Each store file has a single logical writer; readers may be
concurrent.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

from .curation import CurationOutcome, CurationRecord, JudgeVerdict, Stage
from .model import (
    AbortReason,
    Action,
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
from .objective import LossBatch, TrajectoryTokens
from .synthesis import FileRecord, QuerySpec

SCHEMA_VERSION = 1

KIND_FILE = "file"
KIND_TASK = "task"
KIND_TRAJECTORY = "trajectory"
KIND_CURATION = "curation"
KIND_REWARD = "reward"
KIND_EVAL = "eval"
KIND_EXPORT = "export"

KINDS = (KIND_FILE, KIND_TASK, KIND_TRAJECTORY, KIND_CURATION, KIND_REWARD, KIND_EVAL, KIND_EXPORT)


class StoreError(RuntimeError):
    pass


class JsonlStore:
    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, kind: str) -> Path:
        if kind not in KINDS:
            raise StoreError(f"unknown record kind: {kind!r}")
        return self.root / f"{kind}.jsonl"

    def append(self, kind: str, record_id: str, payload: dict) -> None:
        line = json.dumps(
            {"kind": kind, "schema_version": SCHEMA_VERSION, "id": record_id, "payload": payload},
            ensure_ascii=False,
        )
        with open(self._path(kind), "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def iter_records(self, kind: str) -> Iterator[tuple[str, dict]]:
        path = self._path(kind)
        if not path.exists():
            return
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise StoreError(f"{path}:{line_no}: corrupt record: {exc}") from exc
                if record.get("kind") != kind:
                    raise StoreError(f"{path}:{line_no}: kind mismatch")
                yield record["id"], record["payload"]

    def ids(self, kind: str) -> set[str]:
        return {record_id for record_id, _ in self.iter_records(kind)}

    def count(self, kind: str) -> int:
        return sum(1 for _ in self.iter_records(kind))


# ---------------------------------------------------------------------------
# Task serialization
# ---------------------------------------------------------------------------


def task_to_payload(task: AnalysisTask) -> dict:
    return {
        "id": task.id,
        "query": task.query,
        "file": {"path": task.file.path, "format": task.file.format},
        "description": task.description,
        "gold_answer": task.gold_answer,
        "category": task.category.value if task.category else None,
        "composition_depth": task.composition_depth,
    }


def task_from_payload(payload: dict) -> AnalysisTask:
    return AnalysisTask(
        id=payload["id"],
        query=payload["query"],
        file=DataFile(path=payload["file"]["path"], format=payload["file"]["format"]),
        description=payload.get("description"),
        gold_answer=payload.get("gold_answer"),
        category=TaskCategory(payload["category"]) if payload.get("category") else None,
        composition_depth=payload.get("composition_depth", 1),
    )


# ---------------------------------------------------------------------------
# Trajectory serialization
# ---------------------------------------------------------------------------


def _action_to_payload(action: Action) -> dict:
    if isinstance(action, Code):
        return {"kind": "code", "dialect": action.dialect.value, "text": action.text}
    if isinstance(action, Answer):
        return {"kind": "answer", "text": action.text}
    return {"kind": "void"}


def _action_from_payload(payload: dict) -> Action:
    kind = payload["kind"]
    if kind == "code":
        return Code(text=payload["text"], dialect=Dialect(payload["dialect"]))
    if kind == "answer":
        return Answer(text=payload["text"])
    if kind == "void":
        return Void()
    raise StoreError(f"unknown action kind: {kind!r}")


def turn_to_payload(turn: TurnRecord) -> dict:
    return {
        "thought": turn.thought,
        "action": _action_to_payload(turn.action),
        "observation": turn.observation,
        "raw": turn.raw,
    }


def turn_from_payload(payload: dict) -> TurnRecord:
    return TurnRecord(
        thought=payload.get("thought"),
        action=_action_from_payload(payload["action"]),
        observation=payload.get("observation"),
        raw=payload.get("raw"),
    )


def trajectory_to_payload(traj: Trajectory) -> dict:
    return {
        "task_id": traj.task_id,
        "turns": [turn_to_payload(t) for t in traj.turns],
        "status": traj.status.value,
        "final_answer": traj.final_answer,
        "provenance": traj.provenance.value,
        "abort_reason": traj.abort_reason.value if traj.abort_reason else None,
    }


def trajectory_from_payload(payload: dict) -> Trajectory:
    return Trajectory(
        task_id=payload["task_id"],
        turns=tuple(turn_from_payload(t) for t in payload["turns"]),
        status=TrajectoryStatus(payload["status"]),
        final_answer=payload.get("final_answer"),
        provenance=Provenance(payload["provenance"]),
        abort_reason=AbortReason(payload["abort_reason"]) if payload.get("abort_reason") else None,
    )


# ---------------------------------------------------------------------------
# File / query records
# ---------------------------------------------------------------------------


def file_record_to_payload(record: FileRecord) -> dict:
    return {
        "file": {"path": record.file.path, "format": record.file.format},
        "row_count": record.row_count,
        "column_count": record.column_count,
        "table_name": record.table_name,
    }


def file_record_from_payload(payload: dict) -> FileRecord:
    return FileRecord(
        file=DataFile(path=payload["file"]["path"], format=payload["file"]["format"]),
        row_count=payload["row_count"],
        column_count=payload["column_count"],
        table_name=payload.get("table_name"),
    )


def query_spec_to_payload(spec: QuerySpec) -> dict:
    return {
        "question": spec.question,
        "description": spec.description,
        "category": spec.category.value,
        "source_file": spec.source_file,
        "composition_depth": spec.composition_depth,
        "chain": [c.value for c in spec.chain],
    }


# ---------------------------------------------------------------------------
# Curation records
# ---------------------------------------------------------------------------


def curation_to_payload(record: CurationRecord) -> dict:
    return {
        "task_id": record.task_id,
        "candidates": [trajectory_to_payload(t) for t in record.candidates],
        "verdicts": [
            {"reasoning": v.reasoning, "consistent": v.consistent, "best_index": v.best_index}
            for v in record.verdicts
        ],
        "outcome": {
            "kept": record.outcome.kept,
            "best_index": record.outcome.best_index,
            "stage": record.outcome.stage.value if record.outcome.stage else None,
            "reason": record.outcome.reason,
        },
    }


def curation_from_payload(payload: dict) -> CurationRecord:
    outcome = payload["outcome"]
    return CurationRecord(
        task_id=payload["task_id"],
        candidates=tuple(trajectory_from_payload(t) for t in payload["candidates"]),
        verdicts=tuple(
            JudgeVerdict(
                reasoning=v["reasoning"], consistent=v["consistent"], best_index=v["best_index"]
            )
            for v in payload["verdicts"]
        ),
        outcome=CurationOutcome(
            kept=outcome["kept"],
            best_index=outcome.get("best_index"),
            stage=Stage(outcome["stage"]) if outcome.get("stage") else None,
            reason=outcome.get("reason"),
        ),
    )


# ---------------------------------------------------------------------------
# Loss batches (the loss-check file format)
# ---------------------------------------------------------------------------


def loss_batch_from_json(data: dict) -> LossBatch:
    """Parse the documented toy-batch file shape:

    {"clip_low": float, "clip_high": float,
     "trajectories": [{"group": str, "reward": float, "void": bool,
                       "logp_current": [...], "logp_old": [...],
                       "agent_mask": [...bool]}]}
    """
    try:
        trajectories = tuple(
            TrajectoryTokens(
                logp_current=tuple(float(x) for x in t["logp_current"]),
                logp_old=tuple(float(x) for x in t["logp_old"]),
                agent_mask=tuple(bool(x) for x in t["agent_mask"]),
                group_id=str(t["group"]),
                reward=float(t["reward"]),
                void=bool(t.get("void", False)),
            )
            for t in data["trajectories"]
        )
        return LossBatch(
            trajectories=trajectories,
            clip_low=float(data.get("clip_low", 0.2)),
            clip_high=float(data.get("clip_high", 0.28)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise StoreError(f"malformed loss batch file: {exc}") from exc


def load_loss_batch(path: str | Path) -> LossBatch:
    with open(path, encoding="utf-8") as fh:
        return loss_batch_from_json(json.load(fh))


def loss_batch_to_json(batch: LossBatch) -> dict:
    return {
        "clip_low": batch.clip_low,
        "clip_high": batch.clip_high,
        "trajectories": [
            {
                "group": t.group_id,
                "reward": t.reward,
                "void": t.void,
                "logp_current": list(t.logp_current),
                "logp_old": list(t.logp_old),
                "agent_mask": list(t.agent_mask),
            }
            for t in batch.trajectories
        ],
    }
