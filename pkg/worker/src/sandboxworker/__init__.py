"""Single-shot execution worker.

Reads exactly one JSON request line from stdin, installs CPU and
address-space limits inside the process, executes the program in the given
workspace with both output streams captured at the file-descriptor level, and
writes exactly one JSON response line to the original stdout before exiting.

    request  {"program": str, "limits": {"cpu_seconds": float,
              "wall_seconds": float, "memory_megabytes": float},
              "workspace": str}
    response {"status": "ok"|"timeout"|"memory_exceeded"|"runtime_error",
              "stdout": str, "stderr": str, "peak_memory_mb": float}

A fresh process per execution: no session state survives, which is the point.
The wall clock is the orchestrator's job; the CPU limit maps to ``timeout``
here via SIGXCPU. Capture happens below the Python layer (dup2 onto unlinked
temp files inside the workspace) so even C-level writes cannot corrupt the
protocol stream, and nothing is ever written outside the workspace.
"""

from __future__ import annotations

import contextlib
import io
import json
import math
import os
import resource
import signal
import sys
import tempfile
import traceback
from dataclasses import dataclass

DEFAULT_STDERR_CAP_BYTES = 16384

STATUS_OK = "ok"
STATUS_TIMEOUT = "timeout"
STATUS_MEMORY = "memory_exceeded"
STATUS_RUNTIME_ERROR = "runtime_error"


class MalformedRequest(ValueError):
    pass


class CpuTimeExceeded(BaseException):
    """Raised from the SIGXCPU handler; BaseException so user code cannot
    swallow it with a bare ``except Exception``."""


@dataclass(frozen=True)
class WorkerRequest:
    program: str
    cpu_seconds: float
    wall_seconds: float
    memory_megabytes: float
    workspace: str


def parse_request(line: str) -> WorkerRequest:
    try:
        data = json.loads(line)
        limits = data["limits"]
        request = WorkerRequest(
            program=str(data["program"]),
            cpu_seconds=float(limits["cpu_seconds"]),
            wall_seconds=float(limits["wall_seconds"]),
            memory_megabytes=float(limits["memory_megabytes"]),
            workspace=str(data["workspace"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedRequest(f"malformed request: {exc}") from exc
    if min(request.cpu_seconds, request.wall_seconds, request.memory_megabytes) <= 0:
        raise MalformedRequest("limits must be strictly positive")
    return request


def _install_limits(request: WorkerRequest) -> None:
    """Apply rlimits before any user code runs. Hard limits stay at infinity
    so the worker can lift the soft caps afterwards to build its response."""
    cpu_soft = max(1, math.ceil(request.cpu_seconds))
    resource.setrlimit(resource.RLIMIT_CPU, (cpu_soft, resource.RLIM_INFINITY))

    def on_sigxcpu(signum, frame):
        raise CpuTimeExceeded()

    signal.signal(signal.SIGXCPU, on_sigxcpu)

    memory_bytes = int(request.memory_megabytes * 1024 * 1024)
    resource.setrlimit(resource.RLIMIT_AS, (memory_bytes, resource.RLIM_INFINITY))


def _lift_limits() -> None:
    resource.setrlimit(resource.RLIMIT_AS, (resource.RLIM_INFINITY, resource.RLIM_INFINITY))
    resource.setrlimit(resource.RLIMIT_CPU, (resource.RLIM_INFINITY, resource.RLIM_INFINITY))


def peak_memory_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def _format_user_traceback(exc: BaseException) -> str:
    """Trim worker frames so the trace starts at the user's program."""
    tb = exc.__traceback__
    while tb is not None and tb.tb_frame.f_code.co_filename != "<program>":
        tb = tb.tb_next
    return "".join(traceback.format_exception(type(exc), exc, tb))


def run(request: WorkerRequest, *, stderr_cap: int = DEFAULT_STDERR_CAP_BYTES) -> dict:
    """Execute one request and return the response payload."""
    os.chdir(request.workspace)

    # Unlinked temp files inside the workspace: capture targets that never
    # appear in a directory listing and vanish with the process.
    out_file = tempfile.TemporaryFile(dir=request.workspace)
    err_file = tempfile.TemporaryFile(dir=request.workspace)

    saved_out = os.dup(1)
    saved_err = os.dup(2)
    sys.stdout.flush()
    sys.stderr.flush()
    os.dup2(out_file.fileno(), 1)
    os.dup2(err_file.fileno(), 2)

    status = STATUS_OK
    error_text = ""
    namespace: dict = {"__name__": "__main__"}
    try:
        _install_limits(request)
        try:
            exec(compile(request.program, "<program>", "exec"), namespace)
        except SystemExit as exc:
            if exc.code not in (None, 0):
                status = STATUS_RUNTIME_ERROR
                error_text = f"SystemExit: {exc.code}\n"
        except MemoryError:
            status = STATUS_MEMORY
            namespace.clear()
        except CpuTimeExceeded:
            status = STATUS_TIMEOUT
            namespace.clear()
        except BaseException as exc:
            status = STATUS_RUNTIME_ERROR
            error_text = _format_user_traceback(exc)
    finally:
        namespace.clear()
        _lift_limits()
        sys.stdout.flush()
        sys.stderr.flush()
        os.dup2(saved_out, 1)
        os.dup2(saved_err, 2)
        os.close(saved_out)
        os.close(saved_err)

    out_file.seek(0)
    stdout_text = out_file.read().decode("utf-8", errors="replace")
    out_file.close()
    err_file.seek(0)
    stderr_bytes = err_file.read()
    err_file.close()
    stderr_text = stderr_bytes.decode("utf-8", errors="replace") + error_text
    if len(stderr_text.encode("utf-8")) > stderr_cap:
        stderr_text = stderr_text.encode("utf-8")[:stderr_cap].decode("utf-8", "replace")

    return {
        "status": status,
        "stdout": stdout_text,
        "stderr": stderr_text,
        "peak_memory_mb": round(peak_memory_mb(), 3),
    }


def serve_once(stdin: io.TextIOBase, stdout: io.TextIOBase, *, stderr_cap: int) -> int:
    """One request, one response, one exit code."""
    line = stdin.readline()
    try:
        request = parse_request(line)
    except MalformedRequest as exc:
        stdout.write(json.dumps({"error": str(exc)}) + "\n")
        stdout.flush()
        return 2
    with contextlib.suppress(BrokenPipeError):
        response = run(request, stderr_cap=stderr_cap)
        stdout.write(json.dumps(response) + "\n")
        stdout.flush()
    return 0
