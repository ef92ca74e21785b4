"""Worker protocol conformance, in-process limits and workspace containment."""

from __future__ import annotations

import json
import re
import subprocess
import sys
import time
from pathlib import Path

import pytest

from sandboxworker import MalformedRequest, parse_request

WORKER_CMD = [sys.executable, "-m", "sandboxworker"]

GENEROUS = {"cpu_seconds": 10, "wall_seconds": 30, "memory_megabytes": 1024}


def request_line(program: str, workspace: Path, limits: dict = GENEROUS) -> str:
    return json.dumps({"program": program, "limits": limits, "workspace": str(workspace)}) + "\n"


def call_worker(program: str, workspace: Path, limits: dict = GENEROUS, extra_args=()):
    proc = subprocess.run(
        WORKER_CMD + list(extra_args),
        input=request_line(program, workspace, limits),
        capture_output=True,
        text=True,
        timeout=60,
    )
    lines = [l for l in proc.stdout.splitlines() if l.strip()]
    return json.loads(lines[0]), proc


def snapshot(root: Path) -> dict[str, int]:
    return {str(p.relative_to(root)): p.stat().st_size for p in root.rglob("*") if p.is_file()}


class TestProtocol:
    def test_echo(self, tmp_path):
        response, proc = call_worker("print(7)", tmp_path)
        assert proc.returncode == 0
        assert response == {
            "status": "ok",
            "stdout": "7\n",
            "stderr": "",
            "peak_memory_mb": response["peak_memory_mb"],
        }
        assert response["peak_memory_mb"] > 0

    def test_runtime_error_carries_traceback(self, tmp_path):
        response, _ = call_worker("1/0", tmp_path)
        assert response["status"] == "runtime_error"
        assert "ZeroDivisionError" in response["stderr"]

    def test_exactly_one_response_then_exit(self, tmp_path):
        two_requests = request_line("print(1)", tmp_path) + request_line("print(2)", tmp_path)
        proc = subprocess.run(
            WORKER_CMD, input=two_requests, capture_output=True, text=True, timeout=60
        )
        responses = [l for l in proc.stdout.splitlines() if l.strip()]
        assert len(responses) == 1

    def test_malformed_request_protocol_error(self, tmp_path):
        proc = subprocess.run(
            WORKER_CMD, input="not json\n", capture_output=True, text=True, timeout=60
        )
        assert proc.returncode != 0
        payload = json.loads(proc.stdout.splitlines()[0])
        assert "error" in payload

    def test_nonpositive_limits_rejected(self):
        with pytest.raises(MalformedRequest):
            parse_request(
                json.dumps(
                    {
                        "program": "1",
                        "limits": {"cpu_seconds": 0, "wall_seconds": 1, "memory_megabytes": 1},
                        "workspace": ".",
                    }
                )
            )

    def test_fd_level_capture(self, tmp_path):
        # os.write to fd 1 bypasses sys.stdout; it must still be captured
        response, _ = call_worker("import os\nos.write(1, b'raw bytes\\n')", tmp_path)
        assert response["status"] == "ok"
        assert response["stdout"] == "raw bytes\n"

    def test_system_exit_zero_is_ok(self, tmp_path):
        response, _ = call_worker("print('before')\nraise SystemExit(0)", tmp_path)
        assert response["status"] == "ok"
        assert response["stdout"] == "before\n"

    def test_system_exit_nonzero_is_runtime_error(self, tmp_path):
        response, _ = call_worker("raise SystemExit(3)", tmp_path)
        assert response["status"] == "runtime_error"
        assert "SystemExit: 3" in response["stderr"]


class TestLimits:
    def test_busy_loop_times_out(self, tmp_path):
        limits = {"cpu_seconds": 1, "wall_seconds": 20, "memory_megabytes": 512}
        started = time.monotonic()
        response, proc = call_worker("while True:\n    pass", tmp_path, limits)
        elapsed = time.monotonic() - started
        assert response["status"] == "timeout"
        assert proc.returncode == 0
        assert elapsed < 10

    def test_monotonic_allocator_hits_memory_cap(self, tmp_path):
        limits = {"cpu_seconds": 10, "wall_seconds": 30, "memory_megabytes": 128}
        program = "blocks = []\nwhile True:\n    blocks.append(bytearray(8 * 1024 * 1024))"
        response, proc = call_worker(program, tmp_path, limits)
        assert response["status"] == "memory_exceeded"
        assert proc.returncode == 0

    def test_limits_installed_before_user_code(self, tmp_path):
        # user code observes the soft address-space cap already in place
        program = (
            "import resource\n"
            "soft, hard = resource.getrlimit(resource.RLIMIT_AS)\n"
            "print(soft == 256 * 1024 * 1024)"
        )
        limits = {"cpu_seconds": 10, "wall_seconds": 30, "memory_megabytes": 256}
        response, _ = call_worker(program, tmp_path, limits)
        assert response["stdout"] == "True\n"

    def test_stderr_truncated_to_cap(self, tmp_path):
        program = "import sys\nsys.stderr.write('e' * 100000)"
        response, _ = call_worker(program, tmp_path, extra_args=["--stderr-cap", "1000"])
        assert len(response["stderr"].encode()) <= 1000


class TestWorkspaceContainment:
    def test_relative_writes_land_in_workspace(self, tmp_path):
        workspace = tmp_path / "ws"
        workspace.mkdir()
        response, _ = call_worker("open('result.csv', 'w').write('a,b\\n1,2\\n')", workspace)
        assert response["status"] == "ok"
        assert (workspace / "result.csv").read_text() == "a,b\n1,2\n"

    def test_never_writes_outside_workspace(self, tmp_path):
        outside = tmp_path / "outside"
        outside.mkdir()
        (outside / "pre.txt").write_text("untouched")
        workspace = tmp_path / "ws"
        workspace.mkdir()

        before = snapshot(outside)
        program = "open('inside.txt', 'w').write('x')\nprint('done')"
        response, _ = call_worker(program, workspace)
        assert response["status"] == "ok"
        assert snapshot(outside) == before
        # the capture temp files are unlinked: only the program's file remains
        assert sorted(p.name for p in workspace.iterdir()) == ["inside.txt"]


GOLDEN_TRANSCRIPTS = [
    (
        {"program": "print(7)", "limits": GENEROUS, "workspace": "{ws}"},
        '{"status": "ok", "stdout": "7\\n", "stderr": "", "peak_memory_mb": 0}',
    ),
    (
        {"program": "print('a')\nprint('b')", "limits": GENEROUS, "workspace": "{ws}"},
        '{"status": "ok", "stdout": "a\\nb\\n", "stderr": "", "peak_memory_mb": 0}',
    ),
    (
        {"program": "1/0", "limits": GENEROUS, "workspace": "{ws}"},
        '{"status": "runtime_error", "stdout": "", "stderr": "Traceback (most recent call last):\\n'
        '  File \\"<program>\\", line 1, in <module>\\nZeroDivisionError: division by zero\\n", '
        '"peak_memory_mb": 0}',
    ),
]


class TestGoldenTranscripts:
    """Byte-identical replay after canonicalizing the one nondeterministic
    field (peak_memory_mb varies run to run and is pinned to 0)."""

    @pytest.mark.parametrize("request_data, expected", GOLDEN_TRANSCRIPTS)
    def test_replay(self, tmp_path, request_data, expected):
        request_data = dict(request_data)
        request_data["workspace"] = str(tmp_path)
        proc = subprocess.run(
            WORKER_CMD,
            input=json.dumps(request_data) + "\n",
            capture_output=True,
            text=True,
            timeout=60,
        )
        line = proc.stdout.splitlines()[0]
        canonical = re.sub(r'"peak_memory_mb": [0-9.]+', '"peak_memory_mb": 0', line)
        assert canonical == expected
