"""Run configuration: named profiles, JSON files and ``--set key=value`` overrides."""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .grpo import GrpoConfig
from .policy import PolicyConfig
from .rewards import RewardWeights
from .sft import SftConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_train: int = 20000
    n_eval: int = 500
    seed: int = 1


@dataclass(frozen=True)
class EvalConfig:
    bench_seed: int = 0
    prompts_per_combo: int = 10
    samples_per_case: int = 4
    temperature: float = 0.8
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    profile: str = "quick"
    world: WorldConfig = field(default_factory=WorldConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# profiles set only sizes and step counts; optimizer settings are the config-class defaults
PROFILES: dict[str, dict] = {
    "quick": {
        "world": {"n_train": 20000, "n_eval": 500},
        "policy": {"d_model": 64, "n_layers": 2, "n_heads": 4},
        "sft": {"steps": 4000},
        "grpo": {"steps": 500},
    },
    "paper-analog": {
        "world": {"n_train": 20000, "n_eval": 500},
        "policy": {"d_model": 128, "n_layers": 4, "n_heads": 4},
        "sft": {"steps": 16000},
        "grpo": {"steps": 500},
    },
}

_SECTIONS = {
    "world": WorldConfig,
    "policy": PolicyConfig,
    "sft": SftConfig,
    "grpo": GrpoConfig,
    "rewards": RewardWeights,
    "eval": EvalConfig,
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(tree: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value: {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    patch: dict = {}
    node = patch
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = _parse_value(raw)
    return _merge(tree, patch)


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            v = values[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def resolve(tree: dict | None = None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    """Expand the named profile, layer the file contents and overrides, then validate."""
    tree = dict(tree or {})
    for o in overrides:
        tree = apply_override(tree, o)
    profile = tree.get("profile", "quick")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    unknown = set(tree) - set(_SECTIONS) - {"profile"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    merged = _merge(PROFILES[profile], {k: v for k, v in tree.items() if k != "profile"})
    sections = {name: _build(cls, merged.get(name, {}), name) for name, cls in _SECTIONS.items()}
    return RunConfig(profile=profile, **sections)


def load_config(path: str | Path | None = None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    tree = {}
    if path is not None:
        try:
            tree = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return resolve(tree, overrides)


def from_dict(data: dict) -> RunConfig:
    """Rebuild a config snapshot exactly as written by :meth:`RunConfig.to_dict`."""
    sections = {name: _build(cls, data[name], name) for name, cls in _SECTIONS.items()}
    return RunConfig(profile=data["profile"], **sections)
