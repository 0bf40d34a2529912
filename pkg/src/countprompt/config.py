"""Experiment configuration: one JSON object with flat dotted keys.

Unknown keys and wrongly typed values are errors.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .bench import METHODS, BenchmarkSpec
from .meta import OptimConfig
from .prompt import TRAIN_CLASSES

DEFAULTS: dict = {
    "seed": 0,
    "fixtures.dir": "fixtures",
    "output.dir": "runs",
    "vocab.dim": 32,
    "vocab.magnitude_scale": 1.0,
    "generator.bind_gain": 1.0,
    "optim.inner_lr": 0.01,
    "optim.outer_lr": 0.01,
    "optim.inner_steps": 3,
    "optim.iterations": 30,
    "optim.lam": 5.0,
    "optim.mode": "first-order",
    "optim.clip": 10.0,
    "optim.semantic": "intent",
    "optim.scale_mode": "static",
    "bench.repetitions": 3,
    "bench.classes": list(TRAIN_CLASSES),
    "bench.unseen": True,
    "bench.clip_weight": 100.0,
    "methods": list(METHODS),
    "workers": 0,
}

# keys that cannot change any output byte
_NOT_HASHED = {"workers", "output.dir", "fixtures.dir"}


class ConfigError(ValueError):
    pass


def _check_type(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


class ExperimentConfig:
    def __init__(self, values: dict | None = None):
        merged = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _check_type(k, v, DEFAULTS[k])
        bad = [m for m in merged["methods"] if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}")
        self.values = merged
        try:
            self.optim()
            self.bench()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in kw.items() if v is not None})
        return ExperimentConfig(vals)

    def optim(self) -> OptimConfig:
        v = self.values
        return OptimConfig(inner_lr=v["optim.inner_lr"], outer_lr=v["optim.outer_lr"],
                           inner_steps=v["optim.inner_steps"], iterations=v["optim.iterations"],
                           lam=v["optim.lam"], mode=v["optim.mode"], clip=v["optim.clip"],
                           seed=v["seed"], semantic=v["optim.semantic"],
                           scale_mode=v["optim.scale_mode"])

    def bench(self) -> BenchmarkSpec:
        return BenchmarkSpec(classes=tuple(self.values["bench.classes"]),
                             repetitions=self.values["bench.repetitions"], seed=self.values["seed"])

    def hash(self) -> str:
        rec = {k: v for k, v in self.values.items() if k not in _NOT_HASHED}
        return hashlib.sha256(json.dumps(rec, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig(raw)
