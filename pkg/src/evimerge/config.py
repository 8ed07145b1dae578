"""Scenario files: a TOML (or JSON) table tree validated against DEFAULTS.

Unknown keys are errors, both in files and in ``section.key=value``
overrides.  Overrides are applied after the file is parsed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bench.corruption import KINDS

DEFAULTS: dict = {
    "tasks": {
        "num_tasks": 4,
        "classes_per_task": 3,
        "feature_dim": 32,
        "task_shift": 4.0,
        "class_sep": 2.0,
        "noise": 0.5,
        "pt": 40,
        "ft": 200,
        "aux": 200,
        "te": 300,
    },
    "model": {"hidden": [64, 64]},
    "pretrain": {"epochs": 20, "lr": 0.05, "batch_size": 32},
    "finetune": {"epochs": 60, "lr": 0.05, "batch_size": 32, "label_scope": "task"},
    "head": {
        "epochs": 20,
        "lr": 0.01,
        "batch_size": 64,
        "lam": 0.1,
        "gamma": 0.1,
        "iec_clip": True,
        "entropy_sign": "as-written",
        "init": "classifier",
    },
    "router": {
        "mode": "layer",
        "epochs": 40,
        "lr": 0.01,
        "batch_size": 64,
        "eta": 0.1,
        "temperature": 0.5,
        "hidden": 32,
        "radius": "percentile",
        "radius_value": 1.0,
        "target_neighbors": 10.0,
        "epsilon": "median",
        "epsilon_value": 0.0,
    },
    "baselines": {"task_arithmetic_scale": 0.3},
    "corruption": {"severity": "L2", "fraction": 0.2, "kinds": list(KINDS), "intensity": 1.0, "aux": False},
    "experiment": {
        "seeds": [0, 1, 2, 3, 4],
        "methods": ["pretrained", "individual", "uniform-average", "task-arithmetic", "static-adaptive", "bd-merging"],
        "ablations": [],
        "severities": ["L2"],
        "unseen_tasks": [],
    },
}


class ConfigError(ValueError):
    def __init__(self, code: str, detail: str):
        super().__init__(detail)
        self.code = code


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError("UNKNOWN_KEY", f"unknown configuration key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError("INVALID_CONFIG", f"{path!r} must be a table")
            _merge(base[key], value, path + ".")
        else:
            base[key] = _coerce(path, base[key], value)


def _coerce(path: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError("INVALID_CONFIG", f"{path!r} expects true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, (int, float, str, list)) and not isinstance(value, type(default)):
        raise ConfigError("INVALID_CONFIG", f"{path!r} expects {type(default).__name__}, got {value!r}")
    return value


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError("INVALID_OVERRIDE", f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


def load_scenario(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError("FILE_NOT_FOUND", f"scenario file {str(path)!r} does not exist")
        text = path.read_text()
        try:
            data = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
            raise ConfigError("INVALID_CONFIG", f"cannot parse {str(path)!r}: {err}") from None
        _merge(cfg, data)
    for item in overrides:
        keys, value = parse_override(item)
        nested: object = value
        for k in reversed(keys):
            nested = {k: nested}
        _merge(cfg, nested)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    t = cfg["tasks"]
    if t["num_tasks"] < 1:
        raise ConfigError("INVALID_CONFIG", "tasks.num_tasks must be >= 1")
    if t["classes_per_task"] < 1:
        raise ConfigError("INVALID_CONFIG", "tasks.classes_per_task must be >= 1")
    if cfg["corruption"]["severity"] not in ("L1", "L2", "L3"):
        raise ConfigError("INVALID_CONFIG", "corruption.severity must be L1, L2 or L3")
    for sev in cfg["experiment"]["severities"]:
        if sev not in ("L1", "L2", "L3"):
            raise ConfigError("INVALID_CONFIG", f"unknown severity {sev!r}")
    for kind in cfg["corruption"]["kinds"]:
        if kind not in KINDS:
            raise ConfigError("INVALID_CONFIG", f"unknown corruption kind {kind!r}")
    for k in cfg["experiment"]["unseen_tasks"]:
        if not 0 <= k < t["num_tasks"]:
            raise ConfigError("INVALID_CONFIG", f"unseen task {k} out of range")
    if len(cfg["experiment"]["unseen_tasks"]) >= t["num_tasks"]:
        raise ConfigError("INVALID_CONFIG", "at least one task must be merged")
    if cfg["router"]["mode"] not in ("task", "layer"):
        raise ConfigError("INVALID_CONFIG", "router.mode must be 'task' or 'layer'")
    if cfg["finetune"]["label_scope"] not in ("task", "unified"):
        raise ConfigError("INVALID_CONFIG", "finetune.label_scope must be 'task' or 'unified'")
    if cfg["head"]["init"] not in ("classifier", "random"):
        raise ConfigError("INVALID_CONFIG", "head.init must be 'classifier' or 'random'")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
