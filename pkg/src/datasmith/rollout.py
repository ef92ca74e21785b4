"""Multi-turn rollout loop and the pass@k evaluation arithmetic.

One trajectory is a loop of: request a completion, parse it into a turn,
execute code actions in the sandbox and append the observation, stop on an
answer or after the round cap. Void turns (no usable action) do not terminate
the loop; the agent may recover on a later round.

Generation and execution pass through two independently bounded slot pools so
a trajectory blocked in code execution never starves another one's endpoint
call, and vice versa.
"""

from __future__ import annotations

import logging
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

from .client import ChatClient, EndpointError
from .codec import DEFAULT_THINK_TAG, parse_turn, render_messages
from .model import (
    AbortReason,
    AnalysisTask,
    Answer,
    Code,
    Provenance,
    Trajectory,
    TrajectoryStatus,
    TurnRecord,
    Void,
)
from .sandbox import (
    ExecResult,
    SandboxConfig,
    SandboxError,
    SandboxSession,
    render_observation,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_ROUNDS = 8
DEFAULT_GROUP_SIZE = 4
DEFAULT_CONCURRENCY = 4
DEFAULT_STOP_SEQUENCES = ("</code>", "</answer>")

ROLLOUT_TEMPERATURE = 0.7
ROLLOUT_TOP_P = 1.0
INFERENCE_TEMPERATURE = 0.7
INFERENCE_TOP_P = 0.95


@dataclass(frozen=True)
class RolloutConfig:
    max_rounds: int = DEFAULT_MAX_ROUNDS
    temperature: float = ROLLOUT_TEMPERATURE
    top_p: float = ROLLOUT_TOP_P
    stop_sequences: tuple[str, ...] = DEFAULT_STOP_SEQUENCES
    concurrency: int = DEFAULT_CONCURRENCY
    group_size: int = DEFAULT_GROUP_SIZE
    max_tokens: Optional[int] = None

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")

    @classmethod
    def for_inference(cls, **overrides) -> "RolloutConfig":
        params = {"temperature": INFERENCE_TEMPERATURE, "top_p": INFERENCE_TOP_P}
        params.update(overrides)
        return cls(**params)


class CodeRunner(Protocol):
    """Per-trajectory execution surface (satisfied by SandboxSession)."""

    def run_code(self, action: Code) -> ExecResult:
        ...


SessionFactory = Callable[[AnalysisTask, str], CodeRunner]


def sandbox_session_factory(config: SandboxConfig, workspace_root: Path) -> SessionFactory:
    """Default factory: a private workspace directory per trajectory."""

    def make(task: AnalysisTask, trajectory_id: str) -> SandboxSession:
        workspace = Path(workspace_root) / trajectory_id.replace("/", "_")
        db_path = Path(task.file.path) if task.file.format == "sqlite" else None
        return SandboxSession(trajectory_id, workspace, config, db_path=db_path)

    return make


class RolloutEngine:
    """Drives trajectories for one (endpoint, template, config) combination."""

    def __init__(
        self,
        client: ChatClient,
        cfg: RolloutConfig,
        system_template: str,
        *,
        session_factory: Optional[SessionFactory] = None,
        think_tag: str = DEFAULT_THINK_TAG,
        observation_role: str = "user",
    ) -> None:
        self.client = client
        self.cfg = cfg
        self.system_template = system_template
        self.session_factory = session_factory
        self.think_tag = think_tag
        self.observation_role = observation_role
        self._gen_slots = threading.BoundedSemaphore(cfg.concurrency)
        self._exec_slots = threading.BoundedSemaphore(cfg.concurrency)

    def run_trajectory(
        self,
        task: AnalysisTask,
        *,
        provenance: Provenance = Provenance.POLICY_ROLLOUT,
        extra_messages: Sequence[dict[str, str]] = (),
    ) -> Trajectory:
        """Roll one trajectory to its terminal state.

        Endpoint and sandbox failures become Aborted trajectories rather than
        exceptions so sibling rollouts keep running. ``extra_messages`` are
        appended after the task input (used for reflection context).
        """
        trajectory_id = f"{task.id}/{uuid.uuid4().hex[:8]}"
        is_db_task = task.file.format == "sqlite"
        turns: list[TurnRecord] = []
        session: Optional[CodeRunner] = None

        def finish(status: TrajectoryStatus, final_answer=None, abort_reason=None) -> Trajectory:
            return Trajectory(
                task_id=task.id,
                turns=tuple(turns),
                status=status,
                final_answer=final_answer,
                provenance=provenance,
                abort_reason=abort_reason,
            )

        for _ in range(self.cfg.max_rounds):
            messages = render_messages(
                task,
                turns,
                self.system_template,
                think_tag=self.think_tag,
                observation_role=self.observation_role,
            )
            if extra_messages:
                messages[2:2] = list(extra_messages)
            try:
                with self._gen_slots:
                    raw = self.client.complete(
                        messages,
                        temperature=self.cfg.temperature,
                        top_p=self.cfg.top_p,
                        stop=self.cfg.stop_sequences,
                        max_tokens=self.cfg.max_tokens,
                    )
            except EndpointError as exc:
                logger.warning("trajectory %s aborted: %s", trajectory_id, exc)
                return finish(TrajectoryStatus.ABORTED, abort_reason=AbortReason.ENDPOINT_FAILURE)

            parsed = parse_turn(raw, think_tag=self.think_tag, database_task=is_db_task)
            if isinstance(parsed.action, Answer):
                turns.append(TurnRecord(thought=parsed.thought, action=parsed.action, raw=raw))
                return finish(TrajectoryStatus.ANSWERED, final_answer=parsed.action.text)
            if isinstance(parsed.action, Code):
                try:
                    if session is None:
                        if self.session_factory is None:
                            raise SandboxError("no sandbox configured for code actions")
                        session = self.session_factory(task, trajectory_id)
                    with self._exec_slots:
                        result = session.run_code(parsed.action)
                except SandboxError as exc:
                    logger.warning("trajectory %s aborted: %s", trajectory_id, exc)
                    return finish(TrajectoryStatus.ABORTED, abort_reason=AbortReason.SANDBOX_FAILURE)
                observation = render_observation(result)
                turns.append(
                    TurnRecord(
                        thought=parsed.thought,
                        action=parsed.action,
                        observation=observation,
                        raw=raw,
                    )
                )
            else:
                turns.append(TurnRecord(thought=parsed.thought, action=Void(), raw=raw))
        return finish(TrajectoryStatus.MAX_ROUNDS_EXCEEDED)

    def run_group(
        self,
        task: AnalysisTask,
        *,
        group_size: Optional[int] = None,
        provenance: Provenance = Provenance.POLICY_ROLLOUT,
        extra_messages: Sequence[dict[str, str]] = (),
    ) -> list[Trajectory]:
        """Sample an independent group concurrently, stable by sample index.

        A crash inside one member surfaces as that member's Aborted status
        and never cancels its siblings.
        """
        size = self.cfg.group_size if group_size is None else group_size
        if size < 1:
            raise ValueError("group size must be >= 1")

        def one(_: int) -> Trajectory:
            return self.run_trajectory(task, provenance=provenance, extra_messages=extra_messages)

        if size == 1:
            return [one(0)]
        with ThreadPoolExecutor(max_workers=min(size, self.cfg.concurrency)) as pool:
            return list(pool.map(one, range(size)))


TRIALS_PER_TASK = 3


@dataclass(frozen=True)
class PassAtK:
    pass_at_1: float
    pass_at_3: float


def pass_at_k(per_task_trials: Sequence[Sequence[bool]]) -> PassAtK:
    """pass@1 = mean per-trial accuracy; pass@3 = fraction of tasks where any
    of the three trials succeeded."""
    if not per_task_trials:
        raise ValueError("no trials provided")
    for trials in per_task_trials:
        if len(trials) != TRIALS_PER_TASK:
            raise ValueError(f"expected exactly {TRIALS_PER_TASK} trials per task, got {len(trials)}")
    n_tasks = len(per_task_trials)
    pass1 = sum(sum(map(bool, trials)) for trials in per_task_trials) / (n_tasks * TRIALS_PER_TASK)
    pass3 = sum(1 for trials in per_task_trials if any(trials)) / n_tasks
    return PassAtK(pass_at_1=pass1, pass_at_3=pass3)
