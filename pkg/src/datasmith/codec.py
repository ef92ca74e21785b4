"""Turn parsing, chat rendering, format scoring and environment-token masks.

The tag schema is fixed: the agent reasons in <think>...</think>, acts in
<code>...</code> (one triple-backtick fence with a language hint) or
<answer>...</answer>, and the environment replies in
<interpreter>...</interpreter>. Expert-sampling templates use <reasoning>
instead of <think>, so the thought tag name is a parameter everywhere.

Parsing is first-match and never raises on degraded input: a completion with
no usable action becomes a Void action plus violations. Recovery heuristics
that would rewrite malformed output into valid turns are deliberately absent;
they would corrupt format-reward semantics.
"""

from __future__ import annotations

import ast
import enum
import re
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Union

from .model import (
    Action,
    AnalysisTask,
    Answer,
    Code,
    Dialect,
    History,
    Trajectory,
    TurnRecord,
    Void,
)

DEFAULT_THINK_TAG = "think"
EXPERT_THINK_TAG = "reasoning"
INTERPRETER_OPEN = "<interpreter>"
INTERPRETER_CLOSE = "</interpreter>"

DATA_SOURCE_PLACEHOLDER = "{data_source_path}"

_FENCE_RE = re.compile(r"\A```([A-Za-z0-9_+-]*)[ \t]*\n(.*?)\n?```\Z", re.DOTALL)
_SQL_PREFIXES = ("select", "with", "pragma", "explain")
_SQL_CALL_NAMES = {"execute_sql", "get_db_info"}


class TemplateError(ValueError):
    """A prompt template is missing a required placeholder."""


class ViolationKind(enum.Enum):
    MISSING_THINK = "missing_think"
    UNCLOSED_TAG = "unclosed_tag"
    MULTIPLE_ANSWERS = "multiple_answers"
    STRAY_TEXT_OUTSIDE_TAGS = "stray_text_outside_tags"
    MALFORMED_CODE_FENCE = "malformed_code_fence"
    MISSING_ACTION = "missing_action"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    span: tuple[int, int]

    def __post_init__(self) -> None:
        start, end = self.span
        if start < 0 or end < start:
            raise ValueError(f"invalid span {self.span}")


@dataclass(frozen=True)
class ParsedTurn:
    thought: Optional[str]
    action: Action
    violations: tuple[Violation, ...]

    @property
    def is_void(self) -> bool:
        return isinstance(self.action, Void)


class TokenFlag(enum.Enum):
    AGENT = "agent"
    ENVIRONMENT = "environment"


@dataclass(frozen=True)
class TokenMask:
    """A lossless token stream with a per-token agent/environment flag."""

    tokens: tuple[str, ...]
    flags: tuple[TokenFlag, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.flags):
            raise ValueError("tokens and flags must have equal length")

    @property
    def text(self) -> str:
        return "".join(self.tokens)


class TokenCounter(Protocol):
    """Pluggable tokenizer: a lossless splitter plus a length count."""

    def tokenize(self, text: str) -> list[str]:
        """Split text into tokens whose concatenation reproduces the input."""
        ...

    def count(self, text: str) -> int:
        """Number of countable (non-whitespace) tokens in the text."""
        ...


class WhitespacePunctTokenizer:
    """Default counter: runs of word chars, whitespace, or other symbols.

    Whitespace runs are kept in the token stream (the stream must partition
    the input exactly) but excluded from ``count``.
    """

    _RUNS = re.compile(r"\w+|\s+|[^\w\s]+")

    def tokenize(self, text: str) -> list[str]:
        return self._RUNS.findall(text)

    def count(self, text: str) -> int:
        return sum(1 for tok in self.tokenize(text) if not tok.isspace())


DEFAULT_TOKENIZER = WhitespacePunctTokenizer()


@dataclass(frozen=True)
class _Block:
    tag: str
    start: int
    end: Optional[int]  # None when the closing tag is missing
    content: str

    @property
    def closed(self) -> bool:
        return self.end is not None


def _find_block(text: str, tag: str, start: int) -> Optional[_Block]:
    open_tag, close_tag = f"<{tag}>", f"</{tag}>"
    i = text.find(open_tag, start)
    if i < 0:
        return None
    body_start = i + len(open_tag)
    j = text.find(close_tag, body_start)
    if j < 0:
        return _Block(tag, i, None, text[body_start:])
    return _Block(tag, i, j + len(close_tag), text[body_start:j])


def _scan_blocks(text: str, tags: Sequence[str], skip: Sequence[tuple[int, int]]) -> list[_Block]:
    """Left-to-right scan for top-level tag blocks outside already-claimed spans."""

    def claiming_span(pos: int) -> Optional[tuple[int, int]]:
        for s, e in skip:
            if s <= pos < e:
                return (s, e)
        return None

    blocks: list[_Block] = []
    pos = 0
    while pos < len(text):
        candidates = [b for b in (_find_block(text, tag, pos) for tag in tags) if b is not None]
        if not candidates:
            break
        block = min(candidates, key=lambda b: b.start)
        claim = claiming_span(block.start)
        if claim is not None:
            pos = max(claim[1], block.start + 1)
            continue
        blocks.append(block)
        pos = block.end if block.end is not None else len(text)
    return blocks


def _parse_fence(code_body: str) -> Optional[str]:
    """Extract the snippet from a single well-formed fenced block, else None."""
    m = _FENCE_RE.match(code_body.strip())
    if m is None:
        return None
    return m.group(2)


def looks_like_sql(snippet: str) -> bool:
    head = snippet.lstrip().lower()
    return head.startswith(_SQL_PREFIXES)


def is_sql_call_surface(snippet: str) -> bool:
    """True when the snippet is nothing but execute_sql/get_db_info calls."""
    try:
        tree = ast.parse(snippet)
    except SyntaxError:
        return False
    if not tree.body:
        return False
    for stmt in tree.body:
        if not (
            isinstance(stmt, ast.Expr)
            and isinstance(stmt.value, ast.Call)
            and isinstance(stmt.value.func, ast.Name)
            and stmt.value.func.id in _SQL_CALL_NAMES
        ):
            return False
    return True


def _detect_dialect(snippet: str, database_task: bool) -> Dialect:
    if is_sql_call_surface(snippet):
        return Dialect.SQL
    if database_task and looks_like_sql(snippet):
        return Dialect.SQL
    return Dialect.SCRIPT


def parse_turn(
    raw: str,
    *,
    think_tag: str = DEFAULT_THINK_TAG,
    database_task: bool = False,
) -> ParsedTurn:
    """Parse one model completion into a structured turn.

    Never raises on arbitrary input: schema deviations are reported as
    violations and an unusable completion degrades to a Void action.
    """
    violations: list[Violation] = []
    recognized: list[tuple[int, int]] = []

    think = _find_block(raw, think_tag, 0)
    thought: Optional[str] = None
    if think is None:
        violations.append(Violation(ViolationKind.MISSING_THINK, (0, 0)))
    else:
        thought = think.content.strip()
        if not think.closed:
            violations.append(Violation(ViolationKind.UNCLOSED_TAG, (think.start, len(raw))))
            recognized.append((think.start, len(raw)))
        else:
            recognized.append((think.start, think.end))

    blocks = _scan_blocks(raw, ("code", "answer"), recognized)

    first_code: Optional[_Block] = None
    first_answer: Optional[_Block] = None
    for block in blocks:
        span = (block.start, block.end if block.end is not None else len(raw))
        if not block.closed:
            violations.append(Violation(ViolationKind.UNCLOSED_TAG, span))
            recognized.append(span)
            continue
        if block.tag == "answer":
            if first_answer is None:
                first_answer = block
                recognized.append(span)
            else:
                violations.append(Violation(ViolationKind.MULTIPLE_ANSWERS, span))
                recognized.append(span)
        else:
            if first_code is None:
                first_code = block
                recognized.append(span)
            else:
                violations.append(Violation(ViolationKind.STRAY_TEXT_OUTSIDE_TAGS, span))
                recognized.append(span)

    # Duplicate thought blocks count as stray content beyond the schema.
    for extra in _scan_blocks(raw, (think_tag,), recognized):
        span = (extra.start, extra.end if extra.end is not None else len(raw))
        violations.append(Violation(ViolationKind.STRAY_TEXT_OUTSIDE_TAGS, span))
        recognized.append(span)

    action: Action = Void()
    code_action: Optional[Code] = None
    if first_code is not None:
        snippet = _parse_fence(first_code.content)
        if snippet is None:
            violations.append(
                Violation(ViolationKind.MALFORMED_CODE_FENCE, (first_code.start, first_code.end))
            )
        else:
            code_action = Code(text=snippet, dialect=_detect_dialect(snippet, database_task))

    if first_answer is not None and (
        code_action is None or first_answer.start < first_code.start
    ):
        action = Answer(text=first_answer.content.strip())
    elif code_action is not None:
        action = code_action

    if isinstance(action, Void):
        violations.append(Violation(ViolationKind.MISSING_ACTION, (0, len(raw))))

    for start, end in _stray_spans(raw, recognized):
        violations.append(Violation(ViolationKind.STRAY_TEXT_OUTSIDE_TAGS, (start, end)))

    return ParsedTurn(thought=thought, action=action, violations=tuple(violations))


def _stray_spans(text: str, recognized: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    """Contiguous runs of non-whitespace characters outside recognized spans.

    Recognized spans are disjoint by construction of the scan above.
    """
    spans = sorted(recognized)
    stray: list[tuple[int, int]] = []
    run_start: Optional[int] = None
    idx = 0
    for i, ch in enumerate(text):
        while idx < len(spans) and spans[idx][1] <= i:
            idx += 1
        inside = idx < len(spans) and spans[idx][0] <= i < spans[idx][1]
        if not inside and not ch.isspace():
            if run_start is None:
                run_start = i
        elif run_start is not None:
            stray.append((run_start, i))
            run_start = None
    if run_start is not None:
        stray.append((run_start, len(text)))
    return stray


def reconstruct_turn(parsed: ParsedTurn, observation: Optional[str] = None) -> TurnRecord:
    """Build a TurnRecord from a parsed turn (structure only, no raw text)."""
    obs = observation if isinstance(parsed.action, Code) else None
    return TurnRecord(thought=parsed.thought, action=parsed.action, observation=obs)


def canonical_turn_text(turn: TurnRecord, *, think_tag: str = DEFAULT_THINK_TAG) -> str:
    """Render a turn's structured fields back into schema-exact text."""
    parts: list[str] = []
    if turn.thought is not None:
        parts.append(f"<{think_tag}>\n{turn.thought}\n</{think_tag}>")
    if isinstance(turn.action, Code):
        lang = "python"
        if turn.action.dialect is Dialect.SQL and not is_sql_call_surface(turn.action.text):
            lang = "sql"
        parts.append(f"<code>\n```{lang}\n{turn.action.text}\n```\n</code>")
    elif isinstance(turn.action, Answer):
        parts.append(f"<answer>\n{turn.action.text}\n</answer>")
    return "\n\n".join(parts)


def turn_text(turn: TurnRecord, *, think_tag: str = DEFAULT_THINK_TAG) -> str:
    """The turn as the model produced it, or its canonical rendering."""
    return turn.raw if turn.raw is not None else canonical_turn_text(turn, think_tag=think_tag)


def wrap_observation(observation: str) -> str:
    return f"{INTERPRETER_OPEN}{observation}{INTERPRETER_CLOSE}"


def render_messages(
    task: AnalysisTask,
    prefix: Union[History, Sequence[TurnRecord]],
    system_template: str,
    *,
    think_tag: str = DEFAULT_THINK_TAG,
    observation_role: str = "user",
) -> list[dict[str, str]]:
    """Render the task input and a turn prefix into ordered chat messages.

    Message 0 is the system template with the data-source placeholder
    substituted; each executed code turn is followed by its observation
    wrapped in interpreter tags.
    """
    if DATA_SOURCE_PLACEHOLDER not in system_template:
        raise TemplateError(f"system template lacks {DATA_SOURCE_PLACEHOLDER}")
    turns = prefix.turns if isinstance(prefix, History) else tuple(prefix)

    user_content = task.query
    if task.description:
        user_content += f"\n\nData file description:\n{task.description}"

    messages = [
        {"role": "system", "content": system_template.replace(DATA_SOURCE_PLACEHOLDER, task.file.path)},
        {"role": "user", "content": user_content},
    ]
    for turn in turns:
        messages.append({"role": "assistant", "content": turn_text(turn, think_tag=think_tag)})
        if turn.observation is not None:
            messages.append({"role": observation_role, "content": wrap_observation(turn.observation)})
    return messages


def render_training_text(
    task: AnalysisTask,
    traj: Trajectory,
    system_template: str,
    *,
    think_tag: str = DEFAULT_THINK_TAG,
) -> str:
    """Flatten a full trajectory into one text block for masking and export."""
    messages = render_messages(task, traj.turns, system_template, think_tag=think_tag)
    return "\n\n".join(m["content"] for m in messages)


def format_ok(traj: Trajectory, *, think_tag: str = DEFAULT_THINK_TAG) -> int:
    """1 iff every turn's text parses with zero violations, else 0."""
    for turn in traj.turns:
        parsed = parse_turn(turn_text(turn, think_tag=think_tag), think_tag=think_tag)
        if parsed.violations:
            return 0
    return 1


def interpreter_spans(text: str) -> list[tuple[int, int]]:
    """Character spans of interpreter blocks, opening/closing tags inclusive.

    An unmatched opening tag claims the rest of the text.
    """
    spans: list[tuple[int, int]] = []
    pos = 0
    while True:
        i = text.find(INTERPRETER_OPEN, pos)
        if i < 0:
            break
        j = text.find(INTERPRETER_CLOSE, i + len(INTERPRETER_OPEN))
        if j < 0:
            spans.append((i, len(text)))
            break
        end = j + len(INTERPRETER_CLOSE)
        spans.append((i, end))
        pos = end
    return spans


def mask_environment_tokens(text: str, counter: TokenCounter = DEFAULT_TOKENIZER) -> TokenMask:
    """Flag every token inside an interpreter span (tags inclusive) as
    environment output; everything else is agent output.

    The text is segmented at span boundaries before tokenization so no token
    straddles a boundary; concatenating the tokens reproduces the input.
    """
    spans = interpreter_spans(text)
    tokens: list[str] = []
    flags: list[TokenFlag] = []

    def emit(segment: str, flag: TokenFlag) -> None:
        if not segment:
            return
        try:
            seg_tokens = counter.tokenize(segment)
        except Exception as exc:
            raise RuntimeError(f"tokenization failed: {exc}") from exc
        if "".join(seg_tokens) != segment:
            raise RuntimeError("tokenizer is not lossless over the input segment")
        tokens.extend(seg_tokens)
        flags.extend([flag] * len(seg_tokens))

    cursor = 0
    for start, end in spans:
        emit(text[cursor:start], TokenFlag.AGENT)
        emit(text[start:end], TokenFlag.ENVIRONMENT)
        cursor = end
    emit(text[cursor:], TokenFlag.AGENT)
    return TokenMask(tokens=tuple(tokens), flags=tuple(flags))
