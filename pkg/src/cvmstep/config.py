"""Experiment configuration: one JSON object with flat dotted keys."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Optional

from .attack import NoiseProfile
from .cache import CacheGeometry
from .classifier import TrainConfig
from .guest import TimingConfig
from .keyrecovery import SearchConfig
from .stepper import StepperKnobs

SCENARIOS = ("calibrate", "step-bench", "pf-trace", "attack-aes", "train-classifier", "nemesis")

# section name -> dataclass whose fields become "<section>.<field>" keys
SECTIONS = {
    "stepper": StepperKnobs,
    "timing": TimingConfig,
    "cache": CacheGeometry,
    "noise": NoiseProfile,
    "classifier": TrainConfig,
    "search": SearchConfig,
}

EXTRA_DEFAULTS: dict[str, Any] = {
    "run.scenario": "calibrate",
    "run.seed": 0,
    "run.out": "out",
    "run.threads": 1,
    "calibrate.slide_length": 4000,
    "step_bench.slide_length": 4000,
    "step_bench.zero_steps": 1000,
    "pf_trace.requests": 2,
    "pf_trace.control_segments": 400,
    "fixture.path": "",
    "fixture.sectors": 70,
    "fixture.known": 34,
    "attack.profile_ops": 400,
    "attack.mass": 0.95,
    "attack.interlude": 2,
    "attack.all_payload_ops": False,
    "train.direction": "encrypt",
    "train.ops": 2000,
    "train.test_fraction": 0.155,
    "nemesis.classes": ["nop", "add", "mul", "div", "lar", "rdrand"],
    "nemesis.slide_length": 1000,
    "nemesis.reps": 10,
    "nemesis.trials": 100,
    "nemesis.trial_samples": 10,
    "nemesis.permutations": 999,
    "nemesis.div_slide_length": 200,
    "nemesis.div_reps": 5,
}


class ConfigError(ValueError):
    pass


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def reference_config() -> dict[str, Any]:
    """Every configurable key with its default value."""
    out = dict(EXTRA_DEFAULTS)
    for sec, cls in SECTIONS.items():
        inst = cls()
        for f in dataclasses.fields(cls):
            out[f"{sec}.{f.name}"] = _plain(getattr(inst, f.name))
    return dict(sorted(out.items()))


def _coerce(key: str, value, default):
    if default is None:
        if value is None or isinstance(value, (int, float)) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a number or null")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected true/false")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected an integer")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected a number")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected a string")
    if isinstance(default, list):
        if isinstance(value, list):
            return value
        raise ConfigError(f"{key}: expected a list")
    return value


@dataclasses.dataclass
class ExperimentConfig:
    values: dict[str, Any]

    @classmethod
    def from_mapping(cls, overrides: Optional[dict[str, Any]] = None) -> "ExperimentConfig":
        values = reference_config()
        for key, v in (overrides or {}).items():
            if isinstance(v, dict):
                raise ConfigError(f"{key}: nested objects are not allowed, use dotted keys")
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, v, values[key])
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: Optional[dict[str, Any]] = None) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data.update(overrides or {})
        return cls.from_mapping(data)

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str):
        cls = SECTIONS[name]
        kw = {}
        for f in dataclasses.fields(cls):
            v = self.values[f"{name}.{f.name}"]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None

    def validate(self) -> None:
        if self["run.scenario"] not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self['run.scenario']!r}; choose from {', '.join(SCENARIOS)}")
        if self["run.threads"] < 1:
            raise ConfigError("run.threads must be >= 1")
        if self["train.direction"] not in ("encrypt", "decrypt"):
            raise ConfigError("train.direction must be encrypt or decrypt")
        for name in SECTIONS:
            self.section(name)

    def dumps(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True)
