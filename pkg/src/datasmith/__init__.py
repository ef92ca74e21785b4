"""datasmith: a desk-scale pipeline for building code-executing data-analysis
agents' training data — task synthesis from raw files, multi-turn sandboxed
rollouts against chat-completion endpoints, self-consistency curation, reward
scoring, and a numerically verified reference of the blended supervised +
clipped policy-gradient objective."""

from .client import HttpChatClient, ModelEndpoint, ScriptedClient
from .codec import (
    ParsedTurn,
    TokenMask,
    WhitespacePunctTokenizer,
    format_ok,
    mask_environment_tokens,
    parse_turn,
    render_messages,
)
from .model import (
    AnalysisTask,
    Answer,
    Code,
    DataFile,
    History,
    TaskCategory,
    Trajectory,
    TrajectoryStatus,
    TurnRecord,
    Void,
    history_at,
    validate_trajectory,
)
from .objective import (
    GammaSchedule,
    LossBatch,
    RewardConfig,
    TrajectoryTokens,
    advantages,
    blended_loss,
    dapo_loss,
    gamma_at,
    group_filter,
    length_reward,
    sft_loss,
    total_reward,
)
from .rollout import PassAtK, RolloutConfig, RolloutEngine, pass_at_k
from .sandbox import (
    CodeChunkLog,
    ExecResult,
    ExecStatus,
    ResourceLimits,
    SandboxConfig,
    SandboxSession,
    build_program,
    execute,
    screen_code,
)

__version__ = "0.1.0"
