"""Layered run configuration: defaults < YAML file < --set overrides.

The tree is validated strictly — unknown keys anywhere are rejected, and
every value must match the type of its default. The effective config is
digestable (canonical JSON sha256) so manifests can prove what a run used.
"""

from __future__ import annotations

import copy
import hashlib
import json
from typing import Any

import yaml

from .backends.base import Backend
from .backends.http import HttpBackend
from .backends.simulated import SimAgentProfile, SimulatedBackend
from .errors import ConfigError
from .orchestrator import LoopConfig
from .rewards import RewardConfig
from .types import ALL_TASKS

DEFAULTS: dict[str, Any] = {
    "corpus": {
        "input": "",
        "store": "corpus_store",
        "contaminants": "",
        "min_chars": 100,
        "max_chars": 32768,
        "min_quality": 1.0,
        "dedup_threshold": 0.8,
        "num_perm": 128,
        "shingle_size": 5,
        "target_clusters": 0,  # 0 derives it from mean_cluster_size
        "mean_cluster_size": 20,
        "branching": 2,
        "seed": 0,
        "domain_label": "corpus",
    },
    "loop": {
        "batch_size": 128,
        "group_size": 8,
        "docs_per_question": 5,
        "history_size": 3,
        "task_mix": {task: 1.0 / len(ALL_TASKS) for task in ALL_TASKS},
        "max_input_tokens": 16384,
        "seed": 0,
        "parallel_instances": 1,
        "grounding_attempts": 1,
        "max_instances_per_step": 0,  # 0 means 32 * batch_size
        "steps": 1,
        "sink_dir": "runs/loop",
        "checkpoint": "",  # empty means <sink_dir>/checkpoint.json
    },
    "reward": {
        "mu": 0.5,
        "sigma": 0.5 / 3.0,
        "penalty_ungrounded": -0.5,
        "penalty_format": -1.0,
        "numeric_rel_tol": 0.0015,
    },
    "backend": {
        "kind": "simulated",
        "base_url": "http://localhost:8000",
        "model": "default",
        "embed_model": "",
        "timeout_s": 60.0,
        "retries": 3,
        "backoff_s": 0.25,
        "max_in_flight": 4,
        "temperature": 0.7,
        "top_p": 0.95,
        "max_tokens": 4096,
    },
    "sim": {
        "seed": 0,
        "responder_skill": 0.55,
        "skill_growth_per_step": 0.01,
        "verifier_accuracy": 0.95,
        "questioner_difficulty_base": 0.15,
        "difficulty_per_exemplar": 0.12,
        "format_break_rate": 0.0,
        "parametric_rate": 0.0,
        "paraphrase_rate": 0.0,
        "unparseable_verdict_rate": 0.0,
        "embedding_dims": 32,
    },
    "eval": {
        "n": 8,
        "k": [1],
        "max_input_tokens": 16384,
        "temperature": 0.7,
        "top_p": 0.95,
        "max_tokens": 4096,
    },
    "trainer": {
        "webhook_url": "",  # empty disables the on-policy gate
        "retries": 3,
    },
}

# Subtrees replaced wholesale instead of key-merged (their keys are data,
# not schema).
_REPLACE_PATHS = {"loop.task_mix"}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    merged = dict(base)
    for key, value in override.items():
        dotted = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = base[key]
        if isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted!r} must be a mapping")
            merged[key] = dict(value) if dotted in _REPLACE_PATHS else _merge(
                current, value, dotted
            )
            continue
        merged[key] = _coerce(dotted, current, value)
    return merged


def _coerce(dotted: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{dotted!r} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{dotted!r} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{dotted!r} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{dotted!r} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{dotted!r} must be a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{dotted!r} has unsupported default type {type(default).__name__}")


def _overrides_tree(pairs: tuple[str, ...] | list[str]) -> dict:
    tree: dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"--set {key}: cannot parse value {raw!r}: {exc}") from exc
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part!r} is not a section")
        node[parts[-1]] = value
    return tree


def load_config(path: str | None = None, overrides: tuple[str, ...] | list[str] = ()) -> dict:
    """Resolve the effective config tree (flags > file > defaults)."""
    config = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                loaded = yaml.safe_load(handle)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping at top level")
        config = _merge(config, loaded)
    if overrides:
        config = _merge(config, _overrides_tree(overrides))
    return config


def config_digest(config: dict) -> str:
    """sha256 of the canonical JSON form of the effective config."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def loop_config_from(config: dict) -> LoopConfig:
    loop = config["loop"]
    backend = config["backend"]
    return LoopConfig(
        batch_size=loop["batch_size"],
        group_size=loop["group_size"],
        docs_per_question=loop["docs_per_question"],
        history_size=loop["history_size"],
        task_mix=dict(loop["task_mix"]),
        max_input_tokens=loop["max_input_tokens"],
        seed=loop["seed"],
        parallel_instances=loop["parallel_instances"],
        grounding_attempts=loop["grounding_attempts"],
        max_instances_per_step=loop["max_instances_per_step"],
        temperature=backend["temperature"],
        top_p=backend["top_p"],
        max_tokens=backend["max_tokens"],
    )


def reward_config_from(config: dict) -> RewardConfig:
    reward = config["reward"]
    return RewardConfig(
        mu=reward["mu"],
        sigma=reward["sigma"],
        penalty_ungrounded=reward["penalty_ungrounded"],
        penalty_format=reward["penalty_format"],
        group_size=config["loop"]["group_size"],
        numeric_rel_tol=reward["numeric_rel_tol"],
    )


def sim_profile_from(config: dict) -> SimAgentProfile:
    return SimAgentProfile(**config["sim"])


def make_backend(config: dict) -> Backend:
    backend = config["backend"]
    kind = backend["kind"]
    if kind == "simulated":
        return SimulatedBackend(sim_profile_from(config))
    if kind == "http":
        return HttpBackend(
            base_url=backend["base_url"],
            model=backend["model"],
            embed_model=backend["embed_model"] or None,
            timeout_s=backend["timeout_s"],
            retries=backend["retries"],
            backoff_s=backend["backoff_s"],
            max_in_flight=backend["max_in_flight"],
        )
    raise ConfigError(f"backend.kind must be 'simulated' or 'http', got {kind!r}")
