"""Declarative pipeline configuration.

One YAML file configures endpoints, rollout defaults, reward/schedule
constants, sandbox limits and the store root. Unknown keys are rejected so
typos fail loudly. ``${VAR}`` references in string values are interpolated
from the environment at load time; credentials are referenced by environment
variable name and never written anywhere.
"""

from __future__ import annotations

import os
import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .client import ModelEndpoint
from .objective import GammaSchedule, RewardConfig
from .rollout import RolloutConfig, INFERENCE_TEMPERATURE, INFERENCE_TOP_P
from .sandbox import InstallPolicy, ResourceLimits

DEFAULT_WORKER_CMD = (sys.executable, "-m", "sandboxworker")


class ConfigError(ValueError):
    pass


_ENV_RE = re.compile(r"\$\{(\w+)\}")


def _interpolate(value):
    if isinstance(value, str):

        def sub(m: re.Match) -> str:
            name = m.group(1)
            if name not in os.environ:
                raise ConfigError(f"environment variable {name} is not set")
            return os.environ[name]

        return _ENV_RE.sub(sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def _take(data: dict, section: str, allowed: set[str]) -> dict:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    return data


@dataclass(frozen=True)
class SandboxSettings:
    worker_cmd: tuple[str, ...] = DEFAULT_WORKER_CMD
    limits: ResourceLimits = field(default_factory=ResourceLimits)
    install_policy: InstallPolicy = InstallPolicy.OFF
    install_allowlist: tuple[str, ...] = ()
    grace_seconds: float = 1.0


@dataclass(frozen=True)
class SynthesisSettings:
    unique_sample: int = 10
    queries_per_file: int = 2
    composed_fraction: float = 0.5
    min_depth: int = 2
    max_depth: int = 5
    seed: int = 0


@dataclass(frozen=True)
class CurationSettings:
    n_candidates: int = 3
    max_answer_tokens: int = 1024
    workflow_granularity: str = "high-level"  # or "step-by-step"


@dataclass(frozen=True)
class PipelineConfig:
    store_root: Path = Path("store")
    workspace_root: Path = Path("workspaces")
    policy: Optional[ModelEndpoint] = None
    expert: Optional[ModelEndpoint] = None
    judge: Optional[ModelEndpoint] = None
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    inference: RolloutConfig = field(
        default_factory=lambda: RolloutConfig.for_inference()
    )
    reward: RewardConfig = field(default_factory=RewardConfig)
    reward_length_source: str = "answer"  # what l counts: answer | full_response
    schedule: GammaSchedule = field(default_factory=lambda: GammaSchedule(total_steps=350))
    clip_low: float = 0.2
    clip_high: float = 0.28
    sandbox: SandboxSettings = field(default_factory=SandboxSettings)
    synthesis: SynthesisSettings = field(default_factory=SynthesisSettings)
    curation: CurationSettings = field(default_factory=CurationSettings)

    def require_endpoint(self, name: str) -> ModelEndpoint:
        endpoint = getattr(self, name)
        if endpoint is None:
            raise ConfigError(f"config defines no {name!r} endpoint")
        return endpoint


def _endpoint_from(data: dict, section: str) -> ModelEndpoint:
    _take(data, section, {"base_url", "model", "api_key_env", "timeout_seconds", "max_attempts"})
    try:
        return ModelEndpoint(**data)
    except TypeError as exc:
        raise ConfigError(f"bad endpoint config in {section}: {exc}") from exc


def _rollout_from(data: dict, section: str, **defaults) -> RolloutConfig:
    allowed = {f.name for f in fields(RolloutConfig)}
    _take(data, section, allowed)
    params = {**defaults, **data}
    if "stop_sequences" in params:
        params["stop_sequences"] = tuple(params["stop_sequences"])
    try:
        return RolloutConfig(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad rollout config in {section}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    data = _interpolate(data or {})
    _take(
        data,
        "config",
        {
            "store_root",
            "workspace_root",
            "endpoints",
            "rollout",
            "inference",
            "reward",
            "schedule",
            "clip",
            "sandbox",
            "synthesis",
            "curation",
        },
    )
    params: dict = {}
    if "store_root" in data:
        params["store_root"] = Path(data["store_root"])
    if "workspace_root" in data:
        params["workspace_root"] = Path(data["workspace_root"])

    endpoints = _take(data.get("endpoints", {}), "endpoints", {"policy", "expert", "judge"})
    for name, section in endpoints.items():
        params[name] = _endpoint_from(dict(section), f"endpoints.{name}")

    if "rollout" in data:
        params["rollout"] = _rollout_from(dict(data["rollout"]), "rollout")
    if "inference" in data:
        params["inference"] = _rollout_from(
            dict(data["inference"]),
            "inference",
            temperature=INFERENCE_TEMPERATURE,
            top_p=INFERENCE_TOP_P,
        )

    if "reward" in data:
        section = _take(dict(data["reward"]), "reward", {"l_min", "l_max", "length_source"})
        source = section.pop("length_source", "answer")
        if source not in ("answer", "full_response"):
            raise ConfigError(f"reward.length_source must be answer|full_response, got {source!r}")
        params["reward_length_source"] = source
        try:
            params["reward"] = RewardConfig(**section)
        except ValueError as exc:
            raise ConfigError(f"bad reward config: {exc}") from exc

    if "schedule" in data:
        section = _take(dict(data["schedule"]), "schedule", {"total_steps", "peak", "valley"})
        try:
            params["schedule"] = GammaSchedule(**section)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad schedule config: {exc}") from exc

    if "clip" in data:
        section = _take(dict(data["clip"]), "clip", {"low", "high"})
        params["clip_low"] = float(section.get("low", 0.2))
        params["clip_high"] = float(section.get("high", 0.28))

    if "sandbox" in data:
        section = _take(
            dict(data["sandbox"]),
            "sandbox",
            {
                "worker_cmd",
                "cpu_seconds",
                "wall_seconds",
                "memory_megabytes",
                "install_policy",
                "install_allowlist",
                "grace_seconds",
            },
        )
        try:
            limits = ResourceLimits(
                cpu_seconds=section.get("cpu_seconds", ResourceLimits().cpu_seconds),
                wall_seconds=section.get("wall_seconds", ResourceLimits().wall_seconds),
                memory_megabytes=section.get(
                    "memory_megabytes", ResourceLimits().memory_megabytes
                ),
            )
            params["sandbox"] = SandboxSettings(
                worker_cmd=tuple(section.get("worker_cmd", DEFAULT_WORKER_CMD)),
                limits=limits,
                install_policy=InstallPolicy(section.get("install_policy", "off")),
                install_allowlist=tuple(section.get("install_allowlist", ())),
                grace_seconds=float(section.get("grace_seconds", 1.0)),
            )
        except ValueError as exc:
            raise ConfigError(f"bad sandbox config: {exc}") from exc

    if "synthesis" in data:
        section = _take(
            dict(data["synthesis"]),
            "synthesis",
            {f.name for f in fields(SynthesisSettings)},
        )
        params["synthesis"] = SynthesisSettings(**section)

    if "curation" in data:
        section = _take(
            dict(data["curation"]),
            "curation",
            {f.name for f in fields(CurationSettings)},
        )
        params["curation"] = CurationSettings(**section)

    return PipelineConfig(**params)


def load_config(path: str | Path) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(data)
