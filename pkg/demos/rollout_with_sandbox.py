"""A scripted three-turn rollout over a small CSV, executed in the real
sandbox (requires the worker package: `pip install -e worker/`).

The "model" is a scripted client, so this runs offline; the code it emits is
genuinely executed by worker processes under resource limits, and the printed
transcript shows the turn/observation alternation the training data is built
from.
"""

import sys
import tempfile
from pathlib import Path

from datasmith.client import ScriptedClient
from datasmith.codec import format_ok
from datasmith.model import AnalysisTask, DataFile
from datasmith.rollout import RolloutConfig, RolloutEngine, sandbox_session_factory
from datasmith.sandbox import ResourceLimits, SandboxConfig
from datasmith.templates import SYSTEM_ANALYST, load_template

workdir = Path(tempfile.mkdtemp(prefix="rollout-demo-"))
csv_path = workdir / "scores.csv"
rows = ["player,points"] + [f"p{i},{(i * 7) % 31 + 10}" for i in range(25)]
csv_path.write_text("\n".join(rows) + "\n")

task = AnalysisTask(
    id="demo-1",
    query="What is the highest points value in the table, and which player holds it?",
    file=DataFile(path=str(csv_path), format="csv"),
)

script = [
    "<think>Load the file and look at its shape first.</think>\n\n"
    "<code>\n```python\nimport csv\nwith open(r'%s') as fh:\n"
    "    rows = list(csv.reader(fh))\nprint(rows[0], len(rows) - 1)\n```\n</code>" % csv_path,
    "<think>Find the maximum points and the matching player.</think>\n\n"
    "<code>\n```python\nbest = max(rows[1:], key=lambda r: int(r[1]))\n"
    "print(best[0], best[1])\n```\n</code>",
    "<think>The maximum is identified; answer directly.</think>\n\n"
    "<answer>Player p22 holds the highest value, 40 points.</answer>",
]

engine = RolloutEngine(
    ScriptedClient(script),
    RolloutConfig(max_rounds=5),
    load_template(SYSTEM_ANALYST),
    session_factory=sandbox_session_factory(
        SandboxConfig(
            worker_cmd=(sys.executable, "-m", "sandboxworker"),
            limits=ResourceLimits(cpu_seconds=10, wall_seconds=30, memory_megabytes=512),
        ),
        workdir / "workspaces",
    ),
)

trajectory = engine.run_trajectory(task)

print(f"status: {trajectory.status.value}")
for i, turn in enumerate(trajectory.turns):
    kind = type(turn.action).__name__.lower()
    print(f"\n--- turn {i} ({kind}) ---")
    print((turn.thought or "").strip())
    if turn.observation is not None:
        print(f"[interpreter] {turn.observation}")
print(f"\nfinal answer: {trajectory.final_answer}")
print(f"format_ok:    {format_ok(trajectory)}")
