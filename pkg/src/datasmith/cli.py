"""Command-line operator surface.

Subcommands chain the pipeline stages over an append-only JSONL store:

    ingest    accept/reject raw data files
    synth     generate tasks from accepted files
    curate    expert-sample, judge, filter; attach gold answers
    rollout   sample policy trajectory groups for curated tasks
    score     reward every rolled-out trajectory
    losscheck print objective components for a toy batch file
    eval      run 3 trials per task and report pass@1 / pass@3
    export    emit masked training records

Every command is resumable: record ids are deterministic and ids already in
the store are skipped, so re-running with unchanged inputs appends nothing.
Exit codes: 0 success, 2 validation failure, 3 endpoint failure.
"""

from __future__ import annotations

import argparse
import random
import sys
from collections import Counter
from pathlib import Path
from typing import Optional

from . import codec, curation, objective, rollout, store as store_mod, synthesis
from .client import EndpointError, HttpChatClient, ModelEndpoint
from .codec import WhitespacePunctTokenizer, TokenFlag
from .config import ConfigError, PipelineConfig, load_config
from .model import AnalysisTask, TaskCategory, TrajectoryStatus
from .rollout import RolloutEngine, pass_at_k, sandbox_session_factory
from .sandbox import SandboxConfig
from .store import JsonlStore
from .templates import SYSTEM_ANALYST, load_template

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ENDPOINT = 3

GOLD_SUFFIX = "#gold"


def _client(endpoint: ModelEndpoint) -> HttpChatClient:
    if endpoint.api_key_env and endpoint.api_key() is None:
        raise EndpointError(
            f"credentials absent: environment variable {endpoint.api_key_env} is not set"
        )
    return HttpChatClient(endpoint)


def _store(cfg: PipelineConfig, args) -> JsonlStore:
    root = Path(args.store) if args.store else cfg.store_root
    return JsonlStore(root)


def _guard_fresh(args, existing: int, stage: str) -> None:
    if not args.resume and existing:
        raise ConfigError(
            f"{stage}: store already holds {existing} records; "
            "re-run with --resume or point --store at a fresh directory"
        )


def _sandbox_factory(cfg: PipelineConfig):
    sandbox_config = SandboxConfig(
        worker_cmd=cfg.sandbox.worker_cmd,
        limits=cfg.sandbox.limits,
        install_policy=cfg.sandbox.install_policy,
        install_allowlist=cfg.sandbox.install_allowlist,
        grace_seconds=cfg.sandbox.grace_seconds,
    )
    return sandbox_session_factory(sandbox_config, cfg.workspace_root)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_ingest(cfg: PipelineConfig, args) -> int:
    store = _store(cfg, args)
    existing = store.ids(store_mod.KIND_FILE)
    _guard_fresh(args, len(existing), "ingest")
    root = Path(args.directory)
    if not root.is_dir():
        raise ConfigError(f"not a directory: {root}")

    paths = sorted(
        p for p in root.rglob("*") if p.suffix.lower() in (".csv", ".xlsx", ".sqlite")
    )
    if args.limit:
        paths = paths[: args.limit]

    accepted = skipped = 0
    reasons: Counter = Counter()
    for path in paths:
        record_id = str(path)
        if record_id in existing:
            skipped += 1
            continue
        outcome = synthesis.ingest_file(path)
        if outcome.accepted:
            store.append(
                store_mod.KIND_FILE, record_id, store_mod.file_record_to_payload(outcome.record)
            )
            accepted += 1
        else:
            reasons[outcome.reason] += 1
    rejected = sum(reasons.values())
    detail = ", ".join(f"{k}={v}" for k, v in sorted(reasons.items())) or "none"
    print(f"ingest: {accepted} accepted, {rejected} rejected ({detail}), {skipped} already stored")
    return EXIT_OK


def cmd_synth(cfg: PipelineConfig, args) -> int:
    store = _store(cfg, args)
    existing = store.ids(store_mod.KIND_TASK)
    _guard_fresh(args, len(existing), "synth")
    client = _client(cfg.require_endpoint("expert"))
    categories = list(TaskCategory)

    produced = skipped = failed = 0
    for file_id, payload in store.iter_records(store_mod.KIND_FILE):
        record = store_mod.file_record_from_payload(payload)
        rng = random.Random(f"{cfg.synthesis.seed}:{file_id}")
        meta = synthesis.extract_meta(record, unique_sample=cfg.synthesis.unique_sample)
        for i in range(cfg.synthesis.queries_per_file):
            category = rng.choice(categories)
            task_id = f"{Path(record.file.path).stem}:{category.name.lower()}:{i}"
            if task_id in existing:
                skipped += 1
                continue
            if args.limit and produced >= args.limit:
                break
            try:
                spec = synthesis.synthesize_query(
                    meta, category, client, source_file=record.file.path
                )
                if rng.random() < cfg.synthesis.composed_fraction:
                    depth = rng.randint(cfg.synthesis.min_depth, cfg.synthesis.max_depth)
                    spec = synthesis.compose_harder(spec, meta, client, depth, rng=rng)
            except (synthesis.SynthesisParseError, synthesis.CategoryMismatchError):
                failed += 1
                continue
            task = AnalysisTask(
                id=task_id,
                query=spec.question,
                file=record.file,
                description=spec.description or None,
                category=spec.category,
                composition_depth=spec.composition_depth,
            )
            store.append(store_mod.KIND_TASK, task_id, store_mod.task_to_payload(task))
            produced += 1
    print(f"synth: {produced} tasks, {failed} failed completions, {skipped} already stored")
    return EXIT_OK


def _stored_tasks(store: JsonlStore, *, gold: bool) -> list[tuple[str, AnalysisTask]]:
    tasks = []
    for record_id, payload in store.iter_records(store_mod.KIND_TASK):
        if record_id.endswith(GOLD_SUFFIX) == gold:
            tasks.append((record_id, store_mod.task_from_payload(payload)))
    return tasks


def cmd_curate(cfg: PipelineConfig, args) -> int:
    store = _store(cfg, args)
    existing = store.ids(store_mod.KIND_CURATION)
    _guard_fresh(args, len(existing), "curate")
    expert = _client(cfg.require_endpoint("expert"))
    judge = _client(cfg.require_endpoint("judge"))
    counter = WhitespacePunctTokenizer()
    factory = _sandbox_factory(cfg)
    tracker = curation.RescueTracker()

    kept = dropped = skipped = 0
    drop_reasons: Counter = Counter()
    processed = 0
    for record_id, task in _stored_tasks(store, gold=False):
        if record_id in existing:
            skipped += 1
            continue
        if args.limit and processed >= args.limit:
            break
        processed += 1
        knowledge = curation.default_knowledge(
            task.category or TaskCategory.DESCRIPTIVE_ANALYSIS,
            curation.Granularity(cfg.curation.workflow_granularity),
        )
        engine = curation.build_expert_engine(
            expert, knowledge, cfg.rollout, session_factory=factory
        )
        record, gold_task = curation.curate_task(
            task,
            engine,
            judge,
            counter,
            n=cfg.curation.n_candidates,
            tracker=tracker,
            max_answer_tokens=cfg.curation.max_answer_tokens,
        )
        store.append(store_mod.KIND_CURATION, record_id, store_mod.curation_to_payload(record))
        if gold_task is not None:
            kept += 1
            store.append(
                store_mod.KIND_TASK,
                record_id + GOLD_SUFFIX,
                store_mod.task_to_payload(gold_task),
            )
            best = record.candidates[record.outcome.best_index - 1]
            store.append(
                store_mod.KIND_TRAJECTORY,
                f"{record_id}:curated",
                store_mod.trajectory_to_payload(best),
            )
        else:
            dropped += 1
            drop_reasons[f"{record.outcome.stage.value}:{record.outcome.reason}"] += 1
    detail = ", ".join(f"{k}={v}" for k, v in sorted(drop_reasons.items())) or "none"
    print(f"curate: {kept} kept, {dropped} dropped ({detail}), {skipped} already stored")
    return EXIT_OK


def cmd_rollout(cfg: PipelineConfig, args) -> int:
    store = _store(cfg, args)
    existing = store.ids(store_mod.KIND_TRAJECTORY)
    _guard_fresh(args, len(existing), "rollout")
    client = _client(cfg.require_endpoint("policy"))
    engine = RolloutEngine(
        client,
        cfg.rollout,
        load_template(SYSTEM_ANALYST),
        session_factory=_sandbox_factory(cfg),
    )

    groups = skipped = 0
    for record_id, task in _stored_tasks(store, gold=True):
        group_key = f"{record_id}:g0"
        if f"{group_key}:s0" in existing:
            skipped += 1
            continue
        if args.limit and groups >= args.limit:
            break
        trajectories = engine.run_group(task)
        for sample_index, traj in enumerate(trajectories):
            payload = store_mod.trajectory_to_payload(traj)
            payload["group_key"] = group_key
            payload["sample_index"] = sample_index
            store.append(store_mod.KIND_TRAJECTORY, f"{group_key}:s{sample_index}", payload)
        groups += 1
    print(f"rollout: {groups} groups of {cfg.rollout.group_size}, {skipped} already stored")
    return EXIT_OK


def cmd_score(cfg: PipelineConfig, args) -> int:
    store = _store(cfg, args)
    existing = store.ids(store_mod.KIND_REWARD)
    _guard_fresh(args, len(existing), "score")
    judge = _client(cfg.require_endpoint("judge"))
    counter = WhitespacePunctTokenizer()
    judge_template = load_template("answer_judge")
    gold_of = {
        task.id: task.gold_answer
        for _, task in _stored_tasks(store, gold=True)
        if task.gold_answer
    }
    query_of = {task.id: task.query for _, task in _stored_tasks(store, gold=True)}

    scored = skipped = 0
    for record_id, payload in store.iter_records(store_mod.KIND_TRAJECTORY):
        if "group_key" not in payload:
            continue  # curated trajectories are not reward targets
        if record_id in existing:
            skipped += 1
            continue
        if args.limit and scored >= args.limit:
            break
        traj = store_mod.trajectory_from_payload(payload)
        gold = gold_of.get(traj.task_id)
        if gold is None:
            continue
        r_format = codec.format_ok(traj)
        if traj.status is TrajectoryStatus.ANSWERED and traj.final_answer:
            r_answer = objective.judge_answer(
                query_of.get(traj.task_id, ""), traj.final_answer, gold, judge, judge_template
            )
        else:
            r_answer = 0
        if cfg.reward_length_source == "full_response":
            length_text = "\n".join(codec.turn_text(t) for t in traj.turns)
        else:
            length_text = traj.final_answer or ""
        breakdown = objective.reward_breakdown(
            r_format, r_answer, counter.count(length_text), cfg.reward
        )
        store.append(
            store_mod.KIND_REWARD,
            record_id,
            {
                "trajectory_id": record_id,
                "task_id": traj.task_id,
                "r_format": breakdown.r_format,
                "r_answer": breakdown.r_answer,
                "r_length": breakdown.r_length,
                "total": breakdown.total,
            },
        )
        scored += 1
    print(f"score: {scored} trajectories scored, {skipped} already stored")
    return EXIT_OK


def cmd_losscheck(cfg: PipelineConfig, args) -> int:
    batch = store_mod.load_loss_batch(args.batch)
    sft = objective.sft_loss(batch)
    included = [
        t
        for gid in batch.group_ids()
        if objective.group_filter([m.reward for m in batch.group(gid)])
        for t in batch.group(gid)
    ]
    print(f"sft_loss: {sft:.9f}")
    if included:
        dapo_batch = objective.LossBatch(
            trajectories=tuple(included), clip_low=batch.clip_low, clip_high=batch.clip_high
        )
        print(f"dapo_loss: {objective.dapo_loss(dapo_batch):.9f}")
    else:
        print("dapo_loss: n/a (no groups survive the uniform-reward filter)")
    gamma = args.gamma
    print(f"blended_loss(gamma={gamma:g}): {objective.blended_loss(gamma, batch):.9f}")
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args) -> int:
    store = _store(cfg, args)
    existing = store.ids(store_mod.KIND_EVAL)
    _guard_fresh(args, len(existing), "eval")
    tasks = _stored_tasks(store, gold=True)
    if args.limit:
        tasks = tasks[: args.limit]

    need_runs = any(
        f"{record_id}:t{trial}" not in existing
        for record_id, task in tasks
        if task.gold_answer
        for trial in range(rollout.TRIALS_PER_TASK)
    )
    if need_runs:
        policy = _client(cfg.require_endpoint("policy"))
        judge = _client(cfg.require_endpoint("judge"))
        judge_template = load_template("answer_judge")
        engine = RolloutEngine(
            policy,
            cfg.inference,
            load_template(SYSTEM_ANALYST),
            session_factory=_sandbox_factory(cfg),
        )
        for record_id, task in tasks:
            if not task.gold_answer:
                continue
            for trial in range(rollout.TRIALS_PER_TASK):
                trial_id = f"{record_id}:t{trial}"
                if trial_id in existing:
                    continue
                traj = engine.run_trajectory(task)
                if traj.status is TrajectoryStatus.ANSWERED and traj.final_answer:
                    correct = bool(
                        objective.judge_answer(
                            task.query, traj.final_answer, task.gold_answer, judge, judge_template
                        )
                    )
                else:
                    correct = False
                store.append(
                    store_mod.KIND_EVAL,
                    trial_id,
                    {
                        "task_id": task.id,
                        "trial": trial,
                        "correct": correct,
                        "answer": traj.final_answer,
                    },
                )

    trials_by_task: dict[str, dict[int, bool]] = {}
    for _, payload in store.iter_records(store_mod.KIND_EVAL):
        trials_by_task.setdefault(payload["task_id"], {})[payload["trial"]] = payload["correct"]
    complete = [
        [trials[t] for t in range(rollout.TRIALS_PER_TASK)]
        for trials in trials_by_task.values()
        if len(trials) == rollout.TRIALS_PER_TASK
    ]
    if not complete:
        print("eval: no tasks with a complete trial set")
        return EXIT_OK
    result = pass_at_k(complete)
    print(
        f"eval: {len(complete)} tasks, pass@1 = {result.pass_at_1:.4f}, "
        f"pass@3 = {result.pass_at_3:.4f}"
    )
    return EXIT_OK


def cmd_export(cfg: PipelineConfig, args) -> int:
    store = _store(cfg, args)
    existing = store.ids(store_mod.KIND_EXPORT)
    _guard_fresh(args, len(existing), "export")
    counter = WhitespacePunctTokenizer()
    template = curation.expert_system_template(
        curation.default_knowledge(TaskCategory.DESCRIPTIVE_ANALYSIS)
    )
    task_of = {
        task.id: task
        for _, task in _stored_tasks(store, gold=True)
    }

    exported = skipped = 0
    for record_id, payload in store.iter_records(store_mod.KIND_TRAJECTORY):
        if not record_id.endswith(":curated"):
            continue
        if record_id in existing:
            skipped += 1
            continue
        if args.limit and exported >= args.limit:
            break
        traj = store_mod.trajectory_from_payload(payload)
        task = task_of.get(traj.task_id)
        if task is None:
            continue
        text = codec.render_training_text(
            task, traj, template, think_tag=codec.EXPERT_THINK_TAG
        )
        mask = codec.mask_environment_tokens(text, counter)
        store.append(
            store_mod.KIND_EXPORT,
            record_id,
            {
                "task_id": traj.task_id,
                "text": text,
                "tokens": list(mask.tokens),
                "trainable": [flag is TokenFlag.AGENT for flag in mask.flags],
            },
        )
        exported += 1
    print(f"export: {exported} training records, {skipped} already stored")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="datasmith",
        description="Synthesize, roll out, curate and score data-analysis agent trajectories.",
    )
    parser.add_argument("--config", help="path to the pipeline YAML config")
    parser.add_argument("--store", help="override the store root directory")
    parser.add_argument("--limit", type=int, default=0, help="cap items processed this run")
    resume = parser.add_mutually_exclusive_group()
    resume.add_argument(
        "--resume",
        action="store_true",
        default=True,
        help="skip records already in the store (default)",
    )
    resume.add_argument(
        "--no-resume",
        dest="resume",
        action="store_false",
        help="refuse to run against a store that already has output for the stage",
    )

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="accept/reject raw data files from a directory")
    p.add_argument("directory")
    p.set_defaults(func=cmd_ingest)

    sub.add_parser("synth", help="synthesize tasks from accepted files").set_defaults(
        func=cmd_synth
    )
    sub.add_parser("curate", help="expert-sample, judge and filter tasks").set_defaults(
        func=cmd_curate
    )
    sub.add_parser("rollout", help="sample policy trajectory groups").set_defaults(
        func=cmd_rollout
    )
    sub.add_parser("score", help="reward stored rollout trajectories").set_defaults(
        func=cmd_score
    )

    p = sub.add_parser("losscheck", help="print objective components for a toy batch file")
    p.add_argument("batch")
    p.add_argument("--gamma", type=float, default=0.5)
    p.set_defaults(func=cmd_losscheck)

    sub.add_parser("eval", help="run 3 trials per task; report pass@1/pass@3").set_defaults(
        func=cmd_eval
    )
    sub.add_parser("export", help="emit masked training records").set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EndpointError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except store_mod.StoreError as exc:
        print(f"store error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
