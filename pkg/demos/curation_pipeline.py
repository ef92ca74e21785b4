"""The curation funnel on mock endpoints: consistency judging, the single
reflection rescue, rule filtering and gold-answer extraction. Runs offline.
"""

import tempfile
import threading
from pathlib import Path

from datasmith.client import ScriptedClient
from datasmith.codec import WhitespacePunctTokenizer
from datasmith.curation import build_expert_engine, curate_task, default_knowledge
from datasmith.model import AnalysisTask, DataFile, TaskCategory
from datasmith.rollout import RolloutConfig

workdir = Path(tempfile.mkdtemp(prefix="curation-demo-"))
csv_path = workdir / "orders.csv"
csv_path.write_text("day,total\n" + "\n".join(f"d{i},{i * 3}" for i in range(30)) + "\n")

task = AnalysisTask(
    id="demo-task",
    query="What is the combined total across all days?",
    file=DataFile(path=str(csv_path), format="csv"),
    category=TaskCategory.AGGREGATION,
)


def expert_returning(answers):
    """Scripted expert: each sampled candidate gets the next answer."""
    lock = threading.Lock()
    state = {"i": 0}

    def script(messages):
        with lock:
            answer = answers[min(state["i"], len(answers) - 1)]
            state["i"] += 1
        return f"<reasoning>summed the column</reasoning>\n\n<answer>{answer}</answer>"

    return ScriptedClient(script)


def judge_saying(*verdicts):
    lines = [
        f"<reasoning>compared all answers</reasoning>\n<correct>{'yes' if ok else 'no'}</correct>\n<number>1</number>"
        for ok in verdicts
    ]
    return ScriptedClient(lines)


counter = WhitespacePunctTokenizer()
knowledge = default_knowledge(TaskCategory.AGGREGATION)
cfg = RolloutConfig(max_rounds=2, concurrency=1, group_size=3)

print("=== consistent candidates are kept ===")
engine = build_expert_engine(expert_returning(["1305", "1305", "1305"]), knowledge, cfg)
record, gold_task = curate_task(task, engine, judge_saying(True), counter)
print(f"outcome: kept={record.outcome.kept}, verdicts={len(record.verdicts)}")
print(f"gold answer attached to task: {gold_task.gold_answer!r}")

print("\n=== disagreement triggers one reflection rescue ===")
engine = build_expert_engine(
    expert_returning(["1305", "1300", "1190", "1305", "1305", "1305"]), knowledge, cfg
)
record, gold_task = curate_task(task, engine, judge_saying(False, True), counter)
print(f"outcome: kept={record.outcome.kept}, verdicts={len(record.verdicts)} (second = post-reflection)")
print(f"revised candidates provenance: {record.candidates[0].provenance.value}")

print("\n=== still inconsistent after the rescue: dropped ===")
engine = build_expert_engine(
    expert_returning(["1", "2", "3", "4", "5", "6"]), knowledge, cfg
)
record, gold_task = curate_task(task, engine, judge_saying(False, False), counter)
print(f"outcome: kept={record.outcome.kept}, stage={record.outcome.stage.value}, reason={record.outcome.reason}")

print("\n=== rule filters drop an overlong answer ===")
long_answer = " ".join(f"word{i}" for i in range(1500))
engine = build_expert_engine(expert_returning([long_answer] * 3), knowledge, cfg)
record, gold_task = curate_task(task, engine, judge_saying(True), counter)
print(f"outcome: kept={record.outcome.kept}, stage={record.outcome.stage.value}, reason={record.outcome.reason}")
