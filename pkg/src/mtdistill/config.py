"""Versioned YAML experiment configuration with fail-fast validation."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

SCHEMA_VERSION = 1

EXPERIMENTS = ("toy-st", "toy-mtl", "toy-ts", "toy-table2", "cond1", "cond2", "cond2m", "cond3",
               "synthseg-matrix", "interaction")
CONDITION_OF = {"cond1": "Cond1", "cond2": "Cond2", "cond2m": "Cond2Mirror", "cond3": "Cond3"}

_TRAINING_KEYS = {"learning_rate": float, "batch_size": int, "epochs": int, "alpha": float,
                  "losses": dict, "beta1": float, "beta2": float, "eps": float}

# every accepted key with its type; nested dicts are sub-schemas
SCHEMA: dict[str, Any] = {
    "schema": int,
    "experiment": str,
    "seeds": list,
    "output_dir": str,
    "workers": int,
    "dump_datasets": bool,
    "dump_pseudo": bool,
    "figures": bool,
    "dataset": {"n_A": int, "n_B": int, "n_classes": int, "source": str},
    "scenario": {"condition": str, "basis_size": int, "cardinalities": list, "seed": int},
    "distill": {
        "tau": float,
        "backbone": list,
        "activation": str,
        "student_heads": str,
        "metrics": dict,
        "teacher": _TRAINING_KEYS,
        "student": _TRAINING_KEYS,
    },
    "interaction": {"threshold": float},
    "table2": {"min_seeds": int, "min_improvement": float},
}

REQUIRED = ("schema", "experiment", "seeds")


class ConfigValidationError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  - " + "\n  - ".join(problems))


def _check(d: dict, schema: dict, path: str, problems: list[str]) -> None:
    for key, value in d.items():
        where = f"{path}{key}"
        if key not in schema:
            problems.append(f"unknown key {where!r}")
            continue
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                problems.append(f"{where!r} must be a mapping")
            else:
                _check(value, expected, where + ".", problems)
            continue
        ok = isinstance(value, expected)
        if expected is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if expected is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        if not ok:
            problems.append(f"{where!r} must be {expected.__name__}, got {type(value).__name__}")


def validate(cfg: dict) -> None:
    """Raise ConfigValidationError listing every problem found in ``cfg``."""
    problems: list[str] = []
    if not isinstance(cfg, dict):
        raise ConfigValidationError(["config must be a mapping"])
    for key in REQUIRED:
        if key not in cfg:
            problems.append(f"missing required key {key!r}")
    _check(cfg, SCHEMA, "", problems)
    if cfg.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        problems.append(f"schema version {cfg.get('schema')} not supported (expected {SCHEMA_VERSION})")
    exp = cfg.get("experiment")
    if exp is not None and exp not in EXPERIMENTS:
        problems.append(f"unknown experiment {exp!r}; expected one of {', '.join(EXPERIMENTS)}")
    seeds = cfg.get("seeds")
    if isinstance(seeds, list):
        if not seeds:
            problems.append("'seeds' must be non-empty")
        elif not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            problems.append("'seeds' must be a list of integers")
        elif len(set(seeds)) != len(seeds):
            problems.append("'seeds' must not repeat")
    ds = cfg.get("dataset", {})
    if isinstance(ds, dict):
        n_A, n_B = ds.get("n_A"), ds.get("n_B")
        if isinstance(n_A, int) and n_A < 1:
            problems.append("'dataset.n_A' must be positive")
        if isinstance(n_A, int) and isinstance(n_B, int) and not 0 <= n_B <= n_A:
            problems.append("'dataset.n_B' must lie in [0, n_A]")
        if ds.get("source", "synthseg") not in ("synthseg", "scenario"):
            problems.append("'dataset.source' must be 'synthseg' or 'scenario'")
    dist = cfg.get("distill", {})
    if isinstance(dist, dict):
        tau = dist.get("tau")
        if isinstance(tau, (int, float)) and not 0 <= tau <= 1:
            problems.append("'distill.tau' must lie in [0, 1]")
        for part in ("teacher", "student"):
            tc = dist.get(part, {})
            if not isinstance(tc, dict):
                continue
            if isinstance(tc.get("epochs"), int) and tc["epochs"] < 1:
                problems.append(f"'distill.{part}.epochs' must be at least 1")
            if isinstance(tc.get("learning_rate"), (int, float)) and tc["learning_rate"] < 0:
                problems.append(f"'distill.{part}.learning_rate' must be non-negative")
            if isinstance(tc.get("batch_size"), int) and tc["batch_size"] < 1:
                problems.append(f"'distill.{part}.batch_size' must be at least 1")
            if isinstance(tc.get("alpha"), (int, float)) and tc["alpha"] < 0:
                problems.append(f"'distill.{part}.alpha' must be non-negative")
    if isinstance(cfg.get("workers"), int) and cfg["workers"] < 1:
        problems.append("'workers' must be at least 1")
    if problems:
        raise ConfigValidationError(problems)


def builtin_path(name: str) -> Path:
    return Path(str(resources.files("mtdistill") / "configs" / f"{name}.yaml"))


def builtin_names() -> list[str]:
    return sorted(p.stem for p in Path(str(resources.files("mtdistill") / "configs")).glob("*.yaml"))


def load(source) -> dict:
    """Read a config from a path or the name of a bundled config, unvalidated."""
    p = Path(source)
    if not p.exists():
        b = builtin_path(str(source))
        if not b.exists():
            raise ConfigValidationError([f"no config file or bundled config named {str(source)!r}"])
        p = b
    data = yaml.safe_load(p.read_text())
    if not isinstance(data, dict):
        raise ConfigValidationError([f"{p}: top level must be a mapping"])
    return data


def apply_override(cfg: dict, text: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigValidationError([f"override {text!r} is not of the form key=value"])
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigValidationError([f"override {key!r}: {p!r} is not a mapping"])
    node[parts[-1]] = yaml.safe_load(raw)
    return cfg


def resolve(source, overrides=(), seeds=None, out=None) -> dict:
    cfg = copy.deepcopy(load(source))
    for o in overrides:
        apply_override(cfg, o)
    if seeds:
        cfg["seeds"] = list(seeds)
    if out is not None:
        cfg["output_dir"] = str(out)
    validate(cfg)
    return cfg


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def fingerprint(cfg: dict) -> str:
    """Stable hash of the configuration, independent of key order and formatting."""
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()[:16]
