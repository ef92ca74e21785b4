"""Sandboxed execution of agent code.

The orchestrator never executes agent code in-process. Script snippets are
screened, concatenated with their predecessor chunks (predecessor output
suppressed, so the result behaves like a stateful notebook without keeping a
variable pool) and shipped to a fresh worker process per execution. The worker
enforces CPU and memory limits internally; the orchestrator enforces the
wall-clock kill. SQL actions never reach a worker: the database surface
(schema inspection, read-only queries materialized to CSV) runs natively here
because the database engine is fixed to sqlite.

Worker protocol (newline-delimited JSON over the worker's stdin/stdout):

    request  {"program": str, "limits": {"cpu_seconds": float,
              "wall_seconds": float, "memory_megabytes": float},
              "workspace": str}
    response {"status": "ok"|"timeout"|"memory_exceeded"|"runtime_error",
              "stdout": str, "stderr": str, "peak_memory_mb": float}

One request per worker lifetime; the worker responds once and exits.
"""

from __future__ import annotations

import ast
import csv
import enum
import json
import logging
import re
import sqlite3
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .model import Code, Dialect

logger = logging.getLogger(__name__)

KILL_GRACE_SECONDS = 1.0

DEFAULT_CPU_SECONDS = 20.0
DEFAULT_WALL_SECONDS = 60.0
DEFAULT_MEMORY_MEGABYTES = 2048.0


class SandboxError(RuntimeError):
    """Orchestrator-level failure (not an agent-code failure)."""


class WorkerUnavailableError(SandboxError):
    """The worker command could not be started."""


@dataclass(frozen=True)
class ResourceLimits:
    cpu_seconds: float = DEFAULT_CPU_SECONDS
    wall_seconds: float = DEFAULT_WALL_SECONDS
    memory_megabytes: float = DEFAULT_MEMORY_MEGABYTES

    def __post_init__(self) -> None:
        if min(self.cpu_seconds, self.wall_seconds, self.memory_megabytes) <= 0:
            raise ValueError("all limits must be strictly positive")
        if self.wall_seconds < self.cpu_seconds:
            raise ValueError("wall_seconds must be >= cpu_seconds")

    def to_json(self) -> dict:
        return {
            "cpu_seconds": self.cpu_seconds,
            "wall_seconds": self.wall_seconds,
            "memory_megabytes": self.memory_megabytes,
        }


class ExecStatus(enum.Enum):
    OK = "ok"
    TIMEOUT = "timeout"
    MEMORY_EXCEEDED = "memory_exceeded"
    DENIED = "denied"
    RUNTIME_ERROR = "runtime_error"
    WORKER_CRASH = "worker_crash"


_STDOUT_BEARING = (ExecStatus.OK, ExecStatus.RUNTIME_ERROR)


@dataclass(frozen=True)
class ExecResult:
    status: ExecStatus
    stdout_delta: str = ""
    stderr: str = ""
    wall_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.status not in _STDOUT_BEARING and self.stdout_delta:
            raise ValueError(f"stdout_delta must be empty for status {self.status.value}")


class CodeChunkLog:
    """Append-only record of the code chunks a trajectory has executed."""

    def __init__(self, trajectory_id: str) -> None:
        self.trajectory_id = trajectory_id
        self._chunks: list[str] = []

    def append(self, snippet: str) -> None:
        self._chunks.append(snippet)

    @property
    def chunks(self) -> tuple[str, ...]:
        return tuple(self._chunks)

    def __len__(self) -> int:
        return len(self._chunks)


# ---------------------------------------------------------------------------
# Snippet screening
# ---------------------------------------------------------------------------

# Capability -> trigger names. The table is versioned repo content; it does
# not claim to match any external system's list. Module entries deny the
# import of the module root; dotted entries deny attribute access or calls.
DENYLIST: dict[str, dict[str, tuple[str, ...]]] = {
    "shell": {
        "calls": (
            "os.system",
            "os.popen",
            "os.execl",
            "os.execle",
            "os.execlp",
            "os.execlpe",
            "os.execv",
            "os.execve",
            "os.execvp",
            "os.execvpe",
            "os.spawnl",
            "os.spawnle",
            "os.spawnlp",
            "os.spawnlpe",
            "os.spawnv",
            "os.spawnve",
            "os.spawnvp",
            "os.spawnvpe",
            "os.fork",
            "os.forkpty",
        ),
        "modules": ("pty",),
    },
    "process": {
        "calls": ("os.kill", "os.abort"),
        "modules": ("subprocess", "multiprocessing"),
    },
    "network": {
        "calls": (),
        "modules": (
            "socket",
            "ssl",
            "http",
            "urllib",
            "requests",
            "httpx",
            "ftplib",
            "smtplib",
            "telnetlib",
            "socketserver",
        ),
    },
    "env": {
        "calls": ("os.putenv", "os.unsetenv"),
        "modules": (),
    },
    "delete": {
        "calls": ("shutil.rmtree", "os.removedirs"),
        "modules": (),
    },
    "obfuscation": {
        "calls": ("eval", "exec", "compile", "__import__"),
        "modules": ("importlib", "ctypes", "builtins"),
    },
}

# os.remove-style calls are denied only when aimed outside the workspace
# (absolute path or parent traversal in a literal argument).
_PATH_DELETE_CALLS = ("os.remove", "os.unlink", "os.rmdir")

_ENV_MUTATORS = ("update", "pop", "setdefault", "clear", "popitem")


@dataclass(frozen=True)
class ScreenDecision:
    allowed: bool
    capability: Optional[str] = None
    detail: Optional[str] = None


_ALLOW = ScreenDecision(allowed=True)


def _denied_modules() -> dict[str, str]:
    table = {}
    for capability, entry in DENYLIST.items():
        for mod in entry["modules"]:
            table[mod] = capability
    return table


def _denied_calls() -> dict[str, str]:
    table = {}
    for capability, entry in DENYLIST.items():
        for name in entry["calls"]:
            table[name] = capability
    return table


def _dotted_name(node: ast.AST, aliases: dict[str, str]) -> Optional[str]:
    parts: list[str] = []
    while isinstance(node, ast.Attribute):
        parts.append(node.attr)
        node = node.value
    if isinstance(node, ast.Name):
        root = aliases.get(node.id, node.id)
        parts.append(root)
        return ".".join(reversed(parts))
    return None


def _literal_path_escapes(call: ast.Call) -> bool:
    for arg in list(call.args) + [kw.value for kw in call.keywords]:
        if isinstance(arg, ast.Constant) and isinstance(arg.value, str):
            if arg.value.startswith(("/", "~")) or ".." in arg.value.split("/"):
                return True
    return False


def screen_code(snippet: str) -> ScreenDecision:
    """Static screen of a snippet against the denylist table.

    Decided before any process is spawned. A snippet that does not parse is
    allowed through: it cannot execute anything, and the runtime's syntax
    error is useful feedback for the agent.
    """
    try:
        tree = ast.parse(snippet)
    except SyntaxError:
        return _ALLOW

    denied_modules = _denied_modules()
    denied_calls = _denied_calls()

    aliases: dict[str, str] = {}
    member_of: dict[str, str] = {}  # bare name -> dotted origin (from-imports)
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            for item in node.names:
                aliases[item.asname or item.name.split(".")[0]] = item.name.split(".")[0]
        elif isinstance(node, ast.ImportFrom) and node.module:
            for item in node.names:
                member_of[item.asname or item.name] = f"{node.module.split('.')[0]}.{item.name}"

    def resolve(node: ast.AST) -> Optional[str]:
        dotted = _dotted_name(node, aliases)
        if dotted and dotted in member_of:
            return member_of[dotted]
        if dotted and dotted.split(".")[0] in member_of:
            head, rest = dotted.split(".", 1)
            return f"{member_of[head]}.{rest}"
        return dotted

    for node in ast.walk(tree):
        if isinstance(node, (ast.Import, ast.ImportFrom)):
            roots = []
            if isinstance(node, ast.Import):
                roots = [item.name.split(".")[0] for item in node.names]
            elif node.module:
                roots = [node.module.split(".")[0]]
            for root in roots:
                if root in denied_modules:
                    return ScreenDecision(False, denied_modules[root], f"import of {root}")

        if isinstance(node, ast.Call):
            name = resolve(node.func)
            if name in denied_calls:
                return ScreenDecision(False, denied_calls[name], f"call to {name}")
            if name in _PATH_DELETE_CALLS and _literal_path_escapes(node):
                return ScreenDecision(False, "delete", f"{name} outside workspace")
            if name and name.startswith("os.environ.") and name.rsplit(".", 1)[-1] in _ENV_MUTATORS:
                return ScreenDecision(False, "env", f"call to {name}")

        if isinstance(node, (ast.Assign, ast.AugAssign, ast.Delete)):
            targets = node.targets if isinstance(node, (ast.Assign, ast.Delete)) else [node.target]
            for target in targets:
                base = target.value if isinstance(target, ast.Subscript) else target
                name = resolve(base)
                if name == "os.environ":
                    return ScreenDecision(False, "env", "mutation of os.environ")

        if isinstance(node, ast.Name) and node.id in denied_calls and node.id in (
            "eval",
            "exec",
            "compile",
            "__import__",
        ):
            return ScreenDecision(False, denied_calls[node.id], f"reference to {node.id}")

    return _ALLOW


# ---------------------------------------------------------------------------
# Chunked program construction
# ---------------------------------------------------------------------------


def build_program(log: CodeChunkLog, active: str) -> str:
    """Concatenate predecessor chunks (stdout suppressed) with the active one.

    The generated program replays every logged chunk into a shared namespace,
    discarding their standard output, then runs the active snippet with output
    visible. For deterministic code this reproduces a stateful notebook's
    per-cell behavior without holding a variable pool between steps.
    """
    lines = [
        "import contextlib as _contextlib",
        "import io as _io",
        "_CHUNKS = [",
    ]
    for chunk in log.chunks:
        lines.append(f"    {chunk!r},")
    lines += [
        "]",
        f"_ACTIVE = {active!r}",
        '_g = {"__name__": "__main__"}',
        "for _i, _src in enumerate(_CHUNKS):",
        "    with _contextlib.redirect_stdout(_io.StringIO()):",
        '        exec(compile(_src, f"<chunk {_i}>", "exec"), _g)',
        'exec(compile(_ACTIVE, f"<chunk {len(_CHUNKS)}>", "exec"), _g)',
        "",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Worker execution
# ---------------------------------------------------------------------------


def execute(
    program: str,
    limits: ResourceLimits,
    workspace: Path,
    worker_cmd: Sequence[str],
    *,
    grace_seconds: float = KILL_GRACE_SECONDS,
) -> ExecResult:
    """Run a program in a fresh worker process under the stdio protocol.

    The orchestrator owns the wall clock: if no response arrives within
    ``limits.wall_seconds`` the worker is killed and the result is a timeout.
    Worker death or protocol garbage becomes ``worker_crash``, never an
    orchestrator exception.
    """
    workspace = Path(workspace)
    if not workspace.is_dir():
        raise SandboxError(f"workspace does not exist: {workspace}")

    request = json.dumps(
        {"program": program, "limits": limits.to_json(), "workspace": str(workspace)}
    )
    started = time.monotonic()
    try:
        proc = subprocess.Popen(
            list(worker_cmd),
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            cwd=workspace,
            text=True,
            encoding="utf-8",
        )
    except (OSError, ValueError) as exc:
        raise WorkerUnavailableError(f"cannot start worker {worker_cmd!r}: {exc}") from exc

    try:
        out, err = proc.communicate(request + "\n", timeout=limits.wall_seconds)
    except subprocess.TimeoutExpired:
        proc.kill()
        try:
            proc.communicate(timeout=grace_seconds)
        except subprocess.TimeoutExpired:  # pragma: no cover - kill is SIGKILL
            pass
        wall_ms = (time.monotonic() - started) * 1000.0
        return ExecResult(
            status=ExecStatus.TIMEOUT,
            stderr=f"execution exceeded the wall clock limit of {limits.wall_seconds}s",
            wall_ms=wall_ms,
        )

    wall_ms = (time.monotonic() - started) * 1000.0
    response_line = next((line for line in out.splitlines() if line.strip()), "")
    try:
        payload = json.loads(response_line)
        status = ExecStatus(payload["status"])
    except (json.JSONDecodeError, KeyError, ValueError):
        detail = err.strip() or out.strip() or f"worker exited with code {proc.returncode}"
        return ExecResult(status=ExecStatus.WORKER_CRASH, stderr=detail[-4000:], wall_ms=wall_ms)

    stdout = payload.get("stdout", "") if status in _STDOUT_BEARING else ""
    return ExecResult(
        status=status,
        stdout_delta=stdout,
        stderr=payload.get("stderr", ""),
        wall_ms=wall_ms,
    )


# ---------------------------------------------------------------------------
# SQL surface (orchestrator-native, sqlite only)
# ---------------------------------------------------------------------------


class SqlDenied(Exception):
    """The statement is not a single read-only query."""


class SqlExecutionError(Exception):
    """Syntax or runtime failure; the text is agent-visible feedback."""


_READONLY_HEADS = ("select", "with", "values", "explain")
_COMMENT_RE = re.compile(r"^\s*(--[^\n]*\n|/\*.*?\*/\s*)*", re.DOTALL)


def get_db_info(db: Path) -> str:
    """Describe every table: name plus column names and declared types."""
    uri = f"file:{Path(db)}?mode=ro"
    try:
        conn = sqlite3.connect(uri, uri=True)
        try:
            tables = [
                row[0]
                for row in conn.execute(
                    "SELECT name FROM sqlite_master WHERE type='table' "
                    "AND name NOT LIKE 'sqlite_%' ORDER BY name"
                )
            ]
            lines = [f"Database contains {len(tables)} table(s)."]
            for table in tables:
                cols = conn.execute(f'PRAGMA table_info("{table}")').fetchall()
                lines.append(f"Table '{table}':")
                for _, name, decl_type, *_ in cols:
                    lines.append(f"  - {name} ({decl_type or 'ANY'})")
            return "\n".join(lines)
        finally:
            conn.close()
    except sqlite3.Error as exc:
        raise SqlExecutionError(f"cannot read database: {exc}") from exc


@dataclass(frozen=True)
class SqlResult:
    row_count: int
    header: tuple[str, ...]
    preview: tuple[tuple, ...]
    output_file: Path


def execute_sql(db: Path, sql: str, output_path: str, workspace: Path) -> SqlResult:
    """Run one read-only statement and materialize the result as CSV.

    The result file gets a header row; the preview holds the first 5 rows.
    Mutating statements and multi-statement strings are denied before the
    database is touched; sqlite errors surface as agent-visible text.
    """
    body = _COMMENT_RE.sub("", sql).strip()
    head = body.split(None, 1)[0].lower() if body else ""
    if head not in _READONLY_HEADS:
        raise SqlDenied(f"only read-only queries are allowed (got {head or 'empty'!r})")

    target = (Path(workspace) / output_path).resolve()
    if not str(target).startswith(str(Path(workspace).resolve()) + "/"):
        raise SqlDenied(f"output path escapes the workspace: {output_path!r}")

    uri = f"file:{Path(db)}?mode=ro"
    try:
        conn = sqlite3.connect(uri, uri=True)
    except sqlite3.Error as exc:
        raise SqlExecutionError(f"cannot open database: {exc}") from exc
    try:
        try:
            cursor = conn.execute(body)
            rows = cursor.fetchall()
        except sqlite3.Warning as exc:
            # sqlite3 (<=3.11) raises Warning on multi-statement strings.
            raise SqlDenied(str(exc)) from exc
        except sqlite3.ProgrammingError as exc:
            if "one statement" in str(exc):
                raise SqlDenied(str(exc)) from exc
            raise SqlExecutionError(str(exc)) from exc
        except sqlite3.Error as exc:
            raise SqlExecutionError(str(exc)) from exc
        header = tuple(col[0] for col in cursor.description or ())
    finally:
        conn.close()

    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return SqlResult(
        row_count=len(rows),
        header=header,
        preview=tuple(tuple(r) for r in rows[:5]),
        output_file=target,
    )


# ---------------------------------------------------------------------------
# Package installation
# ---------------------------------------------------------------------------


class InstallPolicy(enum.Enum):
    OFF = "off"
    ALLOWLIST = "allowlist"


class InstallOutcome(enum.Enum):
    ATTEMPTED = "attempted"
    SKIPPED = "skipped"


_MODULE_NOT_FOUND_RE = re.compile(r"ModuleNotFoundError: No module named '([^']+)'")


def missing_module_from_stderr(stderr: str) -> Optional[str]:
    m = _MODULE_NOT_FOUND_RE.search(stderr)
    return m.group(1) if m else None


class InstallGate:
    """Tracks installation attempts for one trajectory: one per module, ever."""

    def __init__(self) -> None:
        self._attempted: set[str] = set()

    def maybe_install(
        self,
        missing_module: str,
        policy: InstallPolicy,
        allowlist: Sequence[str] = (),
        installer: Optional[Callable[[str], None]] = None,
    ) -> InstallOutcome:
        if policy is InstallPolicy.OFF:
            return InstallOutcome.SKIPPED
        if missing_module in self._attempted:
            return InstallOutcome.SKIPPED
        if missing_module not in allowlist:
            return InstallOutcome.SKIPPED
        if installer is None:
            raise SandboxError("installer unavailable")
        self._attempted.add(missing_module)
        installer(missing_module)
        return InstallOutcome.ATTEMPTED


def pip_installer(module: str) -> None:
    import sys

    subprocess.run(
        [sys.executable, "-m", "pip", "install", module],
        check=False,
        capture_output=True,
        timeout=300,
    )


# ---------------------------------------------------------------------------
# Per-trajectory session
# ---------------------------------------------------------------------------


def render_observation(result: ExecResult, limits: Optional[ResourceLimits] = None) -> str:
    """Turn an execution result into the agent-visible observation text."""
    if result.status is ExecStatus.OK:
        out = result.stdout_delta.rstrip("\n")
        return out if out else "(no output)"
    if result.status is ExecStatus.RUNTIME_ERROR:
        parts = [result.stdout_delta.rstrip("\n"), result.stderr.rstrip("\n")]
        return "\n".join(p for p in parts if p)
    if result.status is ExecStatus.TIMEOUT:
        wall = f" after {limits.wall_seconds}s" if limits else ""
        return f"Execution timed out{wall}."
    if result.status is ExecStatus.MEMORY_EXCEEDED:
        cap = f" ({limits.memory_megabytes:g} MB)" if limits else ""
        return f"Execution exceeded the memory limit{cap}."
    if result.status is ExecStatus.DENIED:
        return f"Execution denied: {result.stderr}"
    return "Execution environment crashed."


@dataclass
class SandboxConfig:
    worker_cmd: Sequence[str]
    limits: ResourceLimits = field(default_factory=ResourceLimits)
    install_policy: InstallPolicy = InstallPolicy.OFF
    install_allowlist: tuple[str, ...] = ()
    installer: Optional[Callable[[str], None]] = None
    grace_seconds: float = KILL_GRACE_SECONDS


class SandboxSession:
    """Execution state for one trajectory: private workspace, chunk log,
    installation gate, and the database path for SQL-surface tasks."""

    def __init__(
        self,
        trajectory_id: str,
        workspace: Path,
        config: SandboxConfig,
        db_path: Optional[Path] = None,
    ) -> None:
        self.trajectory_id = trajectory_id
        self.workspace = Path(workspace)
        self.workspace.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.db_path = db_path
        self.chunk_log = CodeChunkLog(trajectory_id)
        self.install_gate = InstallGate()

    def run_code(self, action: Code) -> ExecResult:
        if action.dialect is Dialect.SQL:
            return self._run_sql(action.text)
        return self._run_script(action.text)

    def _run_script(self, snippet: str) -> ExecResult:
        decision = screen_code(snippet)
        if not decision.allowed:
            return ExecResult(status=ExecStatus.DENIED, stderr=decision.detail or decision.capability)

        program = build_program(self.chunk_log, snippet)
        result = execute(
            program,
            self.config.limits,
            self.workspace,
            self.config.worker_cmd,
            grace_seconds=self.config.grace_seconds,
        )

        if result.status is ExecStatus.RUNTIME_ERROR:
            missing = missing_module_from_stderr(result.stderr)
            if missing is not None:
                outcome = self.install_gate.maybe_install(
                    missing,
                    self.config.install_policy,
                    self.config.install_allowlist,
                    self.config.installer,
                )
                if outcome is InstallOutcome.ATTEMPTED:
                    result = execute(
                        program,
                        self.config.limits,
                        self.workspace,
                        self.config.worker_cmd,
                        grace_seconds=self.config.grace_seconds,
                    )

        if result.status is ExecStatus.OK:
            self.chunk_log.append(snippet)
        return result

    def _run_sql(self, snippet: str) -> ExecResult:
        if self.db_path is None:
            return ExecResult(
                status=ExecStatus.RUNTIME_ERROR,
                stderr="this task has no database file; SQL calls are unavailable",
            )
        started = time.monotonic()
        try:
            outputs = [self._eval_sql_call(call) for call in _parse_sql_calls(snippet)]
            status, text = ExecStatus.OK, "\n".join(outputs)
        except SqlDenied as exc:
            return ExecResult(
                status=ExecStatus.DENIED,
                stderr=str(exc),
                wall_ms=(time.monotonic() - started) * 1000.0,
            )
        except (SqlExecutionError, ValueError) as exc:
            return ExecResult(
                status=ExecStatus.RUNTIME_ERROR,
                stderr=str(exc),
                wall_ms=(time.monotonic() - started) * 1000.0,
            )
        return ExecResult(
            status=status,
            stdout_delta=text,
            wall_ms=(time.monotonic() - started) * 1000.0,
        )

    def _eval_sql_call(self, call: "_SqlCall") -> str:
        if call.name == "get_db_info":
            return get_db_info(self.db_path)
        result = execute_sql(
            self.db_path, call.kwargs["sql"], call.kwargs.get("output_path", "result.csv"), self.workspace
        )
        preview_lines = [",".join(result.header)]
        preview_lines += [",".join(str(v) for v in row) for row in result.preview]
        rel = result.output_file.relative_to(self.workspace.resolve())
        return (
            f"{result.row_count} row(s) written to '{rel}'.\n"
            + "Preview (first 5 rows):\n"
            + "\n".join(preview_lines)
        )


@dataclass(frozen=True)
class _SqlCall:
    name: str
    kwargs: dict


def _parse_sql_calls(snippet: str) -> list[_SqlCall]:
    """Extract execute_sql/get_db_info calls with literal arguments.

    Raw SQL text (a degraded but unambiguous input on database tasks) is
    wrapped as a single execute_sql call with the default output file.
    """
    try:
        tree = ast.parse(snippet)
    except SyntaxError:
        from .codec import looks_like_sql

        if looks_like_sql(snippet):
            return [_SqlCall("execute_sql", {"sql": snippet.strip()})]
        raise ValueError(f"cannot parse SQL action: {snippet[:200]!r}")

    calls: list[_SqlCall] = []
    for stmt in tree.body:
        if not (isinstance(stmt, ast.Expr) and isinstance(stmt.value, ast.Call)):
            raise ValueError("SQL actions must be bare execute_sql/get_db_info calls")
        call = stmt.value
        if not isinstance(call.func, ast.Name) or call.func.id not in ("execute_sql", "get_db_info"):
            raise ValueError("SQL actions must be bare execute_sql/get_db_info calls")
        kwargs: dict = {}
        names = ("sql", "output_path")
        for i, arg in enumerate(call.args):
            kwargs[names[i]] = _literal(arg)
        for kw in call.keywords:
            kwargs[kw.arg] = _literal(kw.value)
        if call.func.id == "execute_sql" and "sql" not in kwargs:
            raise ValueError("execute_sql requires a 'sql' argument")
        calls.append(_SqlCall(call.func.id, kwargs))
    if not calls:
        raise ValueError("empty SQL action")
    return calls


def _literal(node: ast.AST):
    try:
        return ast.literal_eval(node)
    except (ValueError, SyntaxError) as exc:
        raise ValueError("SQL call arguments must be literals") from exc
