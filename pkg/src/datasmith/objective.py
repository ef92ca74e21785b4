"""Reward and training-objective reference math.

Values only: these functions verify what a training framework should compute,
they do not produce gradients. The reward is the piecewise format/answer/length
composite; the losses are the environment-masked supervised loss, the clipped
group-normalized policy-gradient loss with asymmetric bounds and uniform-group
filtering, and their schedule-blended combination.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

DEFAULT_L_MIN = 256
DEFAULT_L_MAX = 1024
DEFAULT_CLIP_LOW = 0.2
DEFAULT_CLIP_HIGH = 0.28
DEFAULT_GAMMA_PEAK = 0.9
DEFAULT_GAMMA_VALLEY = 0.05

FORMAT_PENALTY = -0.1

# A trajectory whose answer was judged correct always lands at or above this.
SUCCESS_REWARD_FLOOR = 0.5


@dataclass(frozen=True)
class RewardConfig:
    l_min: int = DEFAULT_L_MIN
    l_max: int = DEFAULT_L_MAX

    def __post_init__(self) -> None:
        if not (0 < self.l_min < self.l_max):
            raise ValueError("require 0 < l_min < l_max")


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: int
    r_answer: int
    r_length: float
    total: float


def length_reward(l: int, cfg: RewardConfig = RewardConfig()) -> float:
    """Full reward up to l_min, linear decay to 0.5 at l_max, 0.5 beyond."""
    if l < 0:
        raise ValueError("token count must be non-negative")
    if l <= cfg.l_min:
        return 1.0
    if l <= cfg.l_max:
        return (cfg.l_max - l) / (cfg.l_max - cfg.l_min) * 0.5 + 0.5
    return 0.5


def total_reward(r_format: int, r_answer: int, r_length: float) -> float:
    """Piecewise composite: length-scaled when correct, 0 when merely
    well-formatted, -0.1 when neither."""
    if r_format not in (0, 1) or r_answer not in (0, 1):
        raise ValueError("r_format and r_answer are binary")
    if not (0.5 <= r_length <= 1.0):
        raise ValueError("r_length out of range [0.5, 1]")
    if r_answer == 1:
        return r_length * r_answer
    if r_format == 1:
        return 0.0
    return FORMAT_PENALTY


def reward_breakdown(
    r_format: int, r_answer: int, answer_tokens: int, cfg: RewardConfig = RewardConfig()
) -> RewardBreakdown:
    r_length = length_reward(answer_tokens, cfg)
    return RewardBreakdown(
        r_format=r_format,
        r_answer=r_answer,
        r_length=r_length,
        total=total_reward(r_format, r_answer, r_length),
    )


@dataclass(frozen=True)
class GammaSchedule:
    """Cosine anneal of the supervised-loss weight from peak to valley."""

    total_steps: int
    peak: float = DEFAULT_GAMMA_PEAK
    valley: float = DEFAULT_GAMMA_VALLEY

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not (0.0 <= self.valley <= self.peak <= 1.0):
            raise ValueError("require 0 <= valley <= peak <= 1")


def gamma_at(step: int, schedule: GammaSchedule) -> float:
    """Half-cosine interpolation: peak at step 0, valley at total_steps."""
    if not (0 <= step <= schedule.total_steps):
        raise ValueError(f"step {step} out of range [0, {schedule.total_steps}]")
    span = schedule.peak - schedule.valley
    return schedule.valley + span * (1.0 + math.cos(math.pi * step / schedule.total_steps)) / 2.0


@dataclass(frozen=True)
class TrajectoryTokens:
    """Token-level inputs for one trajectory in a loss batch.

    ``agent_mask`` is True on agent-produced tokens and False on environment
    feedback; ``void`` marks trajectories containing void turns, whose entire
    loss contribution is masked out.
    """

    logp_current: tuple[float, ...]
    logp_old: tuple[float, ...]
    agent_mask: tuple[bool, ...]
    group_id: str
    reward: float
    void: bool = False

    def __post_init__(self) -> None:
        if not (len(self.logp_current) == len(self.logp_old) == len(self.agent_mask)):
            raise ValueError("token arrays and mask must align")


@dataclass(frozen=True)
class LossBatch:
    trajectories: tuple[TrajectoryTokens, ...]
    clip_low: float = DEFAULT_CLIP_LOW
    clip_high: float = DEFAULT_CLIP_HIGH

    def __post_init__(self) -> None:
        if self.clip_low <= 0 or self.clip_high <= 0:
            raise ValueError("clip bounds must be positive")

    def group_ids(self) -> list[str]:
        seen: list[str] = []
        for traj in self.trajectories:
            if traj.group_id not in seen:
                seen.append(traj.group_id)
        return seen

    def group(self, group_id: str) -> tuple[TrajectoryTokens, ...]:
        return tuple(t for t in self.trajectories if t.group_id == group_id)


def advantages(group_rewards: Sequence[float]) -> list[float]:
    """Group-normalized advantages: (R_i - mean) / population std."""
    arr = np.asarray(group_rewards, dtype=float)
    if arr.size < 2:
        raise ValueError("a group needs at least 2 rewards to normalize")
    std = float(arr.std())
    if std == 0.0:
        raise ValueError("zero-variance group; filter uniform groups upstream")
    mean = float(arr.mean())
    return [(r - mean) / std for r in arr.tolist()]


def group_filter(group_rewards: Sequence[float]) -> bool:
    """True when the group stays in the policy-gradient objective.

    Uniform groups (every member succeeded, or every member failed) carry no
    ranking signal and are excluded; they are routed to the supervised loss
    only. Success means the answer reward fired (total >= 0.5).
    """
    if not group_rewards:
        raise ValueError("empty group")
    successes = [r >= SUCCESS_REWARD_FLOOR for r in group_rewards]
    return any(successes) and not all(successes)


def sft_loss(batch: LossBatch, *, per_token_mean: bool = False) -> float:
    """Negative log-likelihood over agent tokens, averaged over trajectories.

    Environment tokens contribute zero; void-flagged trajectories contribute
    nothing at all (numerator and denominator alike). ``per_token_mean``
    switches the normalizer from trajectory count to total agent-token count
    for comparability with frameworks that average per token.
    """
    total = 0.0
    n_traj = 0
    n_tokens = 0
    for traj in batch.trajectories:
        if traj.void:
            continue
        n_traj += 1
        for logp, is_agent in zip(traj.logp_current, traj.agent_mask):
            if is_agent:
                total -= logp
                n_tokens += 1
    denom = n_tokens if per_token_mean else n_traj
    if denom == 0:
        return 0.0
    return total / denom


def _effective(traj: TrajectoryTokens) -> Iterable[tuple[float, float]]:
    """(logp_current, logp_old) pairs over agent tokens of a non-void trajectory."""
    for cur, old, is_agent in zip(traj.logp_current, traj.logp_old, traj.agent_mask):
        if is_agent:
            yield cur, old


def dapo_loss(batch: LossBatch) -> float:
    """Token-level clipped policy-gradient loss over the pooled batch.

    Per group, rewards are normalized into advantages; each agent token
    contributes min(ratio * A, clip(ratio, 1-eps_low, 1+eps_high) * A). The
    sum is divided by the pooled count of contributing tokens. Environment
    tokens and void-flagged trajectories contribute to neither the numerator
    nor the normalizer. Groups must be pre-filtered (no uniform groups).
    """
    advantage_of: dict[int, float] = {}
    for gid in batch.group_ids():
        indices = [i for i, t in enumerate(batch.trajectories) if t.group_id == gid]
        advs = advantages([batch.trajectories[i].reward for i in indices])
        for index, adv in zip(indices, advs):
            advantage_of[index] = adv

    numerator = 0.0
    token_count = 0
    lo, hi = 1.0 - batch.clip_low, 1.0 + batch.clip_high
    for i, traj in enumerate(batch.trajectories):
        if traj.void:
            continue
        adv = advantage_of[i]
        for cur, old in _effective(traj):
            ratio = math.exp(cur - old)
            clipped = min(max(ratio, lo), hi)
            numerator += min(ratio * adv, clipped * adv)
            token_count += 1
    if token_count == 0:
        raise ValueError("no effective tokens in batch")
    return -numerator / token_count


def blended_loss(gamma: float, batch: LossBatch, *, per_token_mean: bool = False) -> float:
    """gamma * supervised + (1 - gamma) * policy-gradient.

    Uniform-reward groups drop out of the policy-gradient term (supervised
    only); if no group survives the filter that term is zero. Void-flagged
    trajectories contribute nothing to either term.
    """
    if not (0.0 <= gamma <= 1.0):
        raise ValueError("gamma must lie in [0, 1]")
    sft = sft_loss(batch, per_token_mean=per_token_mean)

    included = [
        traj
        for gid in batch.group_ids()
        if group_filter([m.reward for m in batch.group(gid)])
        for traj in batch.group(gid)
    ]
    has_signal = any(
        not t.void and any(t.agent_mask) for t in included
    )
    if has_signal:
        dapo_batch = LossBatch(
            trajectories=tuple(included), clip_low=batch.clip_low, clip_high=batch.clip_high
        )
        dapo = dapo_loss(dapo_batch)
    else:
        dapo = 0.0
    return gamma * sft + (1.0 - gamma) * dapo


_SCORE_RE = re.compile(r"<score>\s*([01])\s*</score>")
_THOUGHT_RE = re.compile(r"<thought>(.*?)</thought>", re.DOTALL)


class JudgeParseError(ValueError):
    """The judge completion lacked the required tags; safe to retry."""


def parse_answer_verdict(completion: str) -> tuple[str, int]:
    """Extract (thought, score) from a reward-judge completion."""
    score_m = _SCORE_RE.search(completion)
    if score_m is None:
        raise JudgeParseError("no <score> tag in judge output")
    thought_m = _THOUGHT_RE.search(completion)
    thought = thought_m.group(1).strip() if thought_m else ""
    return thought, int(score_m.group(1))


def judge_answer(
    question: str,
    predicted: str,
    gold: str,
    judge,
    template: str,
    *,
    max_attempts: int = 3,
    failure_log: Optional[list[str]] = None,
) -> int:
    """Binary answer reward from a model judge.

    Renders the evaluation template, parses <thought>/<score>, retries on
    unparseable output and scores 0 (with a logged flag) once retries are
    exhausted. ``judge`` is any chat client: judge.complete(messages) -> str.
    """
    if gold is None:
        raise ValueError("gold answer required")
    prompt = (
        template.replace("{question}", question)
        .replace("{pred_answer}", predicted)
        .replace("{ground_truth}", gold)
    )
    messages = [{"role": "user", "content": prompt}]
    for _ in range(max_attempts):
        completion = judge.complete(messages, temperature=0.0)
        try:
            _, score = parse_answer_verdict(completion)
        except JudgeParseError:
            continue
        return score
    if failure_log is not None:
        failure_log.append("judge_failure")
    return 0
