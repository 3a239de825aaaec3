"""Declarative pipeline configuration.

One JSON file drives everything; absent keys get defaults, unknown keys are
an error that names them, and any leaf can be overridden through the
environment with DEPLOYFORGE_-prefixed variables (secrets typically arrive
that way). Relative paths in the file resolve against the file's directory.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

ENV_PREFIX = "DEPLOYFORGE_"

DEFAULTS: dict[str, Any] = {
    "clients": {
        "git_host": {"provider": "mock", "fixture_dir": "", "page_size": 100, "token": ""},
        "search": {"provider": "mock", "fixture_dir": ""},
        "model": {"provider": "mock", "table_path": "", "token": ""},
        "embedding": {"provider": "mock", "vocabulary_path": "", "token": ""},
    },
    "retry": {"attempts": 3, "backoff_s": 0.5},
    "funnel": {
        "max_keywords": 8,
        "expansion_depth": 1,
        "fanout_cap": 25,
        "skip_expansion": False,
        "license_allowlist": [],
        "allow_unknown_license": True,
    },
    "analyzer": {
        "evidence_file_cap_bytes": 64 * 1024,
        "repo_size_cap_bytes": 2 * 1024**3,
        "supplemental_budget": 5,
    },
    "spec_engine": {
        "max_rounds": 4,
        "proposer": "rule",
        "reviewer": "rule",
    },
    "limits": {
        "cpu_slots": 1,
        "memory_bytes": 8 * 1024**3,
        "disk_bytes": 20 * 1024**3,
        "build_timeout_s": 3600.0,
        "validate_timeout_s": 300.0,
    },
    "scheduler": {
        "cpu_slots": 4,
        "memory_bytes": 16 * 1024**3,
        "long_tail_slots": 1,
        "queue_cap": 10_000,
        "long_tail_floor_s": 1800.0,
        "long_tail_multiplier": 6.0,
    },
    "backend": {"kind": "sim", "script_path": ""},
    "paths": {
        "registry": "registry.jsonl",
        "trace": "trace.jsonl",
        "work_dir": ".deployforge",
    },
    "deterministic": True,
}

_PATH_KEYS = {
    ("clients", "git_host", "fixture_dir"),
    ("clients", "search", "fixture_dir"),
    ("clients", "model", "table_path"),
    ("clients", "embedding", "vocabulary_path"),
    ("backend", "script_path"),
    ("paths", "registry"),
    ("paths", "trace"),
    ("paths", "work_dir"),
}

_POSITIVE_KEYS = {
    ("retry", "attempts"),
    ("funnel", "max_keywords"),
    ("funnel", "fanout_cap"),
    ("analyzer", "evidence_file_cap_bytes"),
    ("analyzer", "repo_size_cap_bytes"),
    ("spec_engine", "max_rounds"),
    ("limits", "cpu_slots"),
    ("limits", "memory_bytes"),
    ("limits", "disk_bytes"),
    ("limits", "build_timeout_s"),
    ("limits", "validate_timeout_s"),
    ("scheduler", "cpu_slots"),
    ("scheduler", "memory_bytes"),
    ("scheduler", "queue_cap"),
    ("scheduler", "long_tail_floor_s"),
    ("scheduler", "long_tail_multiplier"),
}


@dataclass
class PipelineConfig:
    values: dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, dotted: str) -> Any:
        node: Any = self.values
        for part in dotted.split("."):
            node = node[part]
        return node

    def path(self, dotted: str) -> Path:
        raw = str(self[dotted])
        p = Path(raw)
        return p if p.is_absolute() else self.base_dir / p

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"


def _merge(base: dict[str, Any], incoming: dict[str, Any], trail: tuple[str, ...],
           unknown: list[str]) -> None:
    for key, value in incoming.items():
        if key not in base:
            unknown.append(".".join(trail + (key,)))
            continue
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, trail + (key,), unknown)
        else:
            base[key] = value


def _coerce_env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _env_overrides(values: dict[str, Any], environ: dict[str, str]) -> None:
    """Apply DEPLOYFORGE_A_B_C=x as values[a][b][c] = x.

    Key segments may themselves contain underscores, so resolution walks
    the known tree greedily, preferring the longest matching segment.
    """
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        tokens = name[len(ENV_PREFIX):].lower().split("_")
        node = values
        i = 0
        path = []
        while i < len(tokens):
            match = None
            for j in range(len(tokens), i, -1):
                candidate = "_".join(tokens[i:j])
                if isinstance(node, dict) and candidate in node:
                    match = (candidate, j)
                    break
            if match is None:
                raise ConfigError(f"environment override {name} matches no config key")
            path.append(match[0])
            if match[1] == len(tokens):
                node[match[0]] = _coerce_env_value(raw)
                break
            node = node[match[0]]
            i = match[1]


def _validate(values: dict[str, Any]) -> None:
    problems = []
    for trail in _POSITIVE_KEYS:
        node: Any = values
        for part in trail:
            node = node[part]
        if not isinstance(node, (int, float)) or isinstance(node, bool) or node <= 0:
            problems.append(f"{'.'.join(trail)} must be a positive number, got {node!r}")
    if values["limits"]["validate_timeout_s"] > values["limits"]["build_timeout_s"]:
        problems.append("limits.validate_timeout_s must not exceed limits.build_timeout_s")
    if values["scheduler"]["long_tail_slots"] < 0:
        problems.append("scheduler.long_tail_slots must be >= 0")
    if values["spec_engine"]["proposer"] not in ("rule", "model"):
        problems.append("spec_engine.proposer must be 'rule' or 'model'")
    if values["spec_engine"]["reviewer"] not in ("rule", "model"):
        problems.append("spec_engine.reviewer must be 'rule' or 'model'")
    if values["backend"]["kind"] not in ("sim", "engine"):
        problems.append("backend.kind must be 'sim' or 'engine'")
    if problems:
        raise ConfigError("; ".join(problems))


def load_config(path: str | Path | None = None,
                environ: dict[str, str] | None = None) -> PipelineConfig:
    """Read a config file, apply defaults, env overrides, and validation."""
    values = copy.deepcopy(DEFAULTS)
    base_dir = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            incoming = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
            ) from exc
        if not isinstance(incoming, dict):
            raise ConfigError("config root must be a JSON object")
        unknown: list[str] = []
        _merge(values, incoming, (), unknown)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        base_dir = p.resolve().parent
    _env_overrides(values, environ if environ is not None else dict(os.environ))
    _validate(values)
    return PipelineConfig(values=values, base_dir=base_dir)
