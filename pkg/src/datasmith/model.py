"""Core domain types: analysis tasks, agent turns and trajectories.

Everything here is an immutable value object. A task pairs a natural-language
query with a data file; a trajectory is the ordered record of one attempt at
the task, alternating reasoning, an action (code, answer, or nothing) and the
environment's feedback, ending in an answer or a round cap.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Union

MIN_COMPOSITION_DEPTH = 1
MAX_COMPOSITION_DEPTH = 5

FILE_FORMATS = ("csv", "xlsx", "sqlite")


class TaskCategory(enum.Enum):
    """Closed taxonomy of analysis question types (18 entries)."""

    AGGREGATION = "Aggregation"
    RANKING = "Ranking"
    COUNTING = "Counting"
    COMPARISON = "Comparison"
    DOMAIN_SPECIFIC = "Domain Specific"
    CAUSAL_ANALYSIS = "Causal Analysis"
    STATISTICAL_ANALYSIS = "Statistical Analysis"
    CORRELATION_ANALYSIS = "Correlation Analysis"
    ARITHMETIC_CALCULATION = "Arithmetic Calculation"
    DESCRIPTIVE_ANALYSIS = "Descriptive Analysis"
    IMPACT_ANALYSIS = "Impact Analysis"
    FACT_CHECKING = "Fact Checking"
    ANOMALY_DETECTION = "Anomaly Detection"
    MULTI_HOP_NUMERICAL_REASONING = "Multi-hop Numerical Reasoning"
    TIME_BASED_CALCULATION = "Time-based Calculation"
    DISTRIBUTION_ANALYSIS = "Distribution Analysis"
    FEATURE_ENGINEERING = "Feature Engineering"
    COMPREHENSIVE_DATA_PREPROCESSING = "Comprehensive Data Preprocessing"

    @classmethod
    def from_label(cls, label: str) -> "TaskCategory":
        """Resolve a display label (case/whitespace tolerant) to a category."""
        wanted = " ".join(label.split()).lower()
        for cat in cls:
            if cat.value.lower() == wanted:
                return cat
        raise ValueError(f"unknown task category: {label!r}")


@dataclass(frozen=True)
class DataFile:
    """A data file reference: path plus its format tag."""

    path: str
    format: str

    def __post_init__(self) -> None:
        if self.format not in FILE_FORMATS:
            raise ValueError(f"unsupported format tag: {self.format!r}")
        if not self.path.lower().endswith("." + self.format):
            raise ValueError(
                f"format tag {self.format!r} does not match file extension of {self.path!r}"
            )

    @classmethod
    def from_path(cls, path: str) -> "DataFile":
        ext = path.rsplit(".", 1)[-1].lower() if "." in path else ""
        if ext not in FILE_FORMATS:
            raise ValueError(f"cannot infer format tag from {path!r}")
        return cls(path=path, format=ext)


@dataclass(frozen=True)
class AnalysisTask:
    """One analysis task: query, data file, optional description and gold answer."""

    id: str
    query: str
    file: DataFile
    description: Optional[str] = None
    gold_answer: Optional[str] = None
    category: Optional[TaskCategory] = None
    composition_depth: int = 1

    def __post_init__(self) -> None:
        if not self.query.strip():
            raise ValueError("query must be non-empty")
        if not (MIN_COMPOSITION_DEPTH <= self.composition_depth <= MAX_COMPOSITION_DEPTH):
            raise ValueError(
                f"composition_depth must be in [{MIN_COMPOSITION_DEPTH}, "
                f"{MAX_COMPOSITION_DEPTH}], got {self.composition_depth}"
            )


class Dialect(enum.Enum):
    SCRIPT = "script"
    SQL = "sql"


@dataclass(frozen=True)
class Code:
    """A code action: a snippet to run, plus which surface runs it."""

    text: str
    dialect: Dialect = Dialect.SCRIPT


@dataclass(frozen=True)
class Answer:
    """A terminal answer action."""

    text: str


@dataclass(frozen=True)
class Void:
    """A turn that produced neither a valid code snippet nor an answer."""


Action = Union[Code, Answer, Void]


@dataclass(frozen=True)
class TurnRecord:
    """One Thought-Action-Observation loop.

    ``raw`` preserves the verbatim model completion when the turn came from a
    live rollout; turns built programmatically (fixtures, reconstruction) may
    leave it unset, in which case the codec synthesizes a canonical rendering.
    """

    thought: Optional[str] = None
    action: Action = field(default_factory=Void)
    observation: Optional[str] = None
    raw: Optional[str] = None

    def __post_init__(self) -> None:
        if isinstance(self.action, Answer) and self.observation is not None:
            raise ValueError("answer turns carry no observation")
        if isinstance(self.action, Void) and self.observation is not None:
            raise ValueError("void turns carry no observation")


class TrajectoryStatus(enum.Enum):
    ANSWERED = "answered"
    MAX_ROUNDS_EXCEEDED = "max_rounds_exceeded"
    ABORTED = "aborted"


class AbortReason(enum.Enum):
    SANDBOX_FAILURE = "sandbox_failure"
    ENDPOINT_FAILURE = "endpoint_failure"
    OPERATOR_CANCEL = "operator_cancel"


class Provenance(enum.Enum):
    EXPERT_SAMPLED = "expert-sampled"
    POLICY_ROLLOUT = "policy-rollout"
    REFLECTED = "reflected"


@dataclass(frozen=True)
class Trajectory:
    """Ordered record of one task attempt."""

    task_id: str
    turns: tuple[TurnRecord, ...]
    status: TrajectoryStatus
    final_answer: Optional[str] = None
    provenance: Provenance = Provenance.POLICY_ROLLOUT
    abort_reason: Optional[AbortReason] = None

    def __post_init__(self) -> None:
        if self.status is TrajectoryStatus.ABORTED and self.abort_reason is None:
            raise ValueError("aborted trajectories must carry an abort reason")
        if self.status is not TrajectoryStatus.ABORTED and self.abort_reason is not None:
            raise ValueError("abort_reason only valid for aborted trajectories")


@dataclass(frozen=True)
class History:
    """The context prefix h_t: the task input followed by turns 0..t-1."""

    task_id: str
    turns: tuple[TurnRecord, ...]


def history_at(traj: Trajectory, t: int) -> History:
    """Return the context prefix at step ``t``: task input plus turns 0..t-1.

    ``t`` == 0 yields only the task input; ``t`` == len(turns) yields the full
    history. No turn at index >= t leaks into the result.
    """
    if not (0 <= t <= len(traj.turns)):
        raise IndexError(f"step index {t} out of range [0, {len(traj.turns)}]")
    return History(task_id=traj.task_id, turns=traj.turns[:t])


def validate_trajectory(traj: Trajectory) -> list[str]:
    """Check structural invariants; return a violation message per breach.

    Pure and idempotent: the same trajectory always yields the same list.
    An empty list means the trajectory is well-formed.
    """
    violations: list[str] = []
    n = len(traj.turns)
    for i, turn in enumerate(traj.turns):
        if isinstance(turn.action, Answer) and i != n - 1:
            violations.append(f"turn {i}: non-terminal answer")
        if turn.observation is not None and not isinstance(turn.action, Code):
            violations.append(f"turn {i}: observation without a code action")

    answered = traj.status is TrajectoryStatus.ANSWERED
    if answered and traj.final_answer is None:
        violations.append("status answered but final_answer absent")
    if not answered and traj.final_answer is not None:
        violations.append(f"final_answer present but status is {traj.status.value}")

    last_is_answer = n > 0 and isinstance(traj.turns[-1].action, Answer)
    if answered and not last_is_answer:
        violations.append("status answered but final turn is not an answer")
    if last_is_answer and not answered:
        violations.append("final turn is an answer but status is not answered")
    if answered and last_is_answer and traj.final_answer != traj.turns[-1].action.text:
        violations.append("final_answer differs from the answer action text")
    return violations
