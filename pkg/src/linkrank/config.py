"""Layered configuration: CLI flag > CRAWLDOC_* environment > file > default.

Files are TOML or JSON with sections ``fetch``, ``renderer``, ``embedder``,
``train``, ``eval`` and ``run``.  Environment variables are named
``CRAWLDOC_<SECTION>_<KEY>`` (e.g. ``CRAWLDOC_EMBEDDER_DIM=1024``); values
are parsed as JSON when possible, else taken as strings.
"""

from __future__ import annotations

import copy
import json
import os
import sys
from pathlib import Path
from typing import Any, Mapping, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ENV_PREFIX = "CRAWLDOC_"

DEFAULTS: dict[str, dict[str, Any]] = {
    "fetch": {
        "timeout_ms": 15000,
        "max_redirects": 5,
        "max_body_bytes": 20 * 1024 * 1024,
        "per_host_parallelism": 4,
        "per_host_delay_ms": 500,
        "respect_robots": True,
        "user_agent": "linkrank/0.1 (+one-hop bibliographic crawler)",
    },
    "renderer": {"provider": "deterministic", "endpoint": "", "on_error": "fallback"},
    "embedder": {"backend": "hash", "dim": 256, "endpoint": "", "max_tokens": 2048, "seed": 0},
    "train": {
        "learning_rate": 3e-5,
        "accumulation_steps": 32,
        "patience": 5,
        "max_epochs": 100,
        "temperature": 0.05,
        "negatives_per_positive": 7,
        "batch_size": 8,
        "momentum": 0.0,
        "rng_seed": 0,
    },
    "eval": {"aggregation": "macro", "split_seed": 0, "ratios": [0.8, 0.1, 0.1]},
    "run": {"manifest_path": "runs/manifest.jsonl", "cache_dir": ""},
}


class ConfigError(ValueError):
    pass


def _parse_env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_file(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a table/object")
    return data


def load_config(path: Optional[str] = None, env: Optional[Mapping[str, str]] = None,
                overrides: Optional[Mapping[str, Mapping[str, Any]]] = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        for section, values in load_file(path).items():
            if section not in cfg or not isinstance(values, dict):
                raise ConfigError(f"unknown config section {section!r}")
            cfg[section].update(values)
    env = os.environ if env is None else env
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        section, _, name = rest.partition("_")
        if section in cfg and name:
            cfg[section][name] = _parse_env_value(raw)
    for section, values in (overrides or {}).items():
        for name, value in values.items():
            if value is not None:
                cfg.setdefault(section, {})[name] = value
    return cfg
