"""Experiment configuration: INI documents with a fixed schema.

A config has five sections ([data], [model], [train], [tuning],
[output]); every key has a typed default, unknown sections or keys are
rejected, and the fully resolved key-value map is written into each
run's summary so results stay reproducible from the summary alone.

Two named presets cover the benchmark experiments:

* ``context-inference``: heterogeneous speed map, static path enabled,
  context inferred during training and testing.
* ``noise-filtering``: uniform speed map, heavy observation noise
  (SNR 0.25), dynamic-input Active Tuning as the wash-in.

Each has a ``-desk`` variant shrunk to run in seconds-to-minutes.
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
from typing import Any

from .core import NetworkConfig
from .training import TrainConfig
from .tuning import TuningConfig

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PRESETS",
    "load_config",
    "load_preset",
]


class ConfigError(Exception):
    """Invalid configuration document or value."""


# kind -> (parser, serializer); empty string encodes None for opt kinds
def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_KINDS = {
    "int": (int, str),
    "float": (float, repr),
    "bool": (_parse_bool, lambda v: "true" if v else "false"),
    "str": (lambda s: s.strip(), str),
    "optfloat": (
        lambda s: None if s.strip() == "" else float(s),
        lambda v: "" if v is None else repr(v),
    ),
    "optint": (
        lambda s: None if s.strip() == "" else int(s),
        lambda v: "" if v is None else str(v),
    ),
}

# section -> key -> (kind, default)
_SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "data": {
        "height": ("int", 16),
        "width": ("int", 16),
        "train_sequences": ("int", 100),
        "train_length": ("int", 70),
        "test_sequences": ("int", 20),
        "test_length": ("int", 140),
        "snr": ("optfloat", None),
        "train_snr": ("optfloat", None),
        "noisy_train": ("bool", True),
        "uniform_speed": ("optfloat", None),
        "amplitude": ("float", 1.0),
        "sigma2": ("float", 0.5),
    },
    "model": {
        "d": ("int", 1),
        "l": ("int", 1),
        "s": ("int", 0),
        "pre": ("int", 8),
        "m": ("int", 12),
        "s_pre": ("int", 5),
    },
    "train": {
        "epochs": ("int", 300),
        "lr": ("float", 1e-3),
        "tf_steps": ("int", 50),
        "cl_steps": ("int", 90),
        "tf_train_steps": ("optint", None),
        "grad_clip": ("optfloat", None),
        "infer_context": ("bool", False),
    },
    "tuning": {
        "history": ("int", 50),
        "cycles": ("int", 1),
        "lr": ("float", 1e-2),
        "target": ("str", "static-context"),
        "alpha": ("float", 0.05),
        "clip_sigma": ("float", 2.5),
        "stats_momentum": ("float", 0.9),
        "postprocess": ("bool", True),
    },
    "output": {
        "checkpoints": ("str", "5,20,80,500"),
        "figures": ("bool", True),
    },
}

PRESETS: dict[str, str] = {
    "context-inference": """
[data]
train_sequences = 100
train_length = 70

[model]
s = 1
pre = 8
m = 12
s_pre = 5

[train]
epochs = 300
infer_context = true
""",
    "context-inference-desk": """
[data]
train_sequences = 30
train_length = 70

[model]
s = 1

[train]
epochs = 50
infer_context = true
""",
    "context-plain": """
[data]
train_sequences = 100
train_length = 70

[model]
s = 0
pre = 8
m = 12

[train]
epochs = 300
""",
    "context-plain-desk": """
[data]
train_sequences = 30
train_length = 70

[model]
s = 0

[train]
epochs = 50
""",
    "noise-filtering": """
[data]
train_sequences = 100
train_length = 40
snr = 0.25
train_snr = 1.0
uniform_speed = 1.0

[model]
s = 0
pre = 4
m = 24

[train]
epochs = 200
tf_train_steps = 30

[tuning]
target = dynamic-input
cycles = 40
""",
    "noise-filtering-desk": """
[data]
train_sequences = 30
train_length = 40
snr = 0.25
train_snr = 1.0
uniform_speed = 1.0

[model]
s = 0
pre = 4
m = 24

[train]
epochs = 40
tf_train_steps = 30

[tuning]
target = dynamic-input
cycles = 40
""",
    "plain": "",
}


class ExperimentConfig:
    """Resolved values for every schema key."""

    def __init__(self, values: dict[str, dict[str, Any]]):
        self.values = values

    @classmethod
    def defaults(cls) -> ExperimentConfig:
        return cls(
            {
                sec: {key: default for key, (_, default) in keys.items()}
                for sec, keys in _SCHEMA.items()
            }
        )

    @classmethod
    def from_resolved(cls, values: dict[str, dict[str, Any]]) -> ExperimentConfig:
        """Rebuild from a summary's resolved-config mapping."""
        cfg = cls.defaults()
        for section, keys in values.items():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in keys.items():
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                cfg.values[section][key] = value
        cfg.validate()
        return cfg

    @classmethod
    def from_ini(cls, text: str) -> ExperimentConfig:
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"malformed config: {err}") from err
        cfg = cls.defaults()
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                kind, _ = _SCHEMA[section][key]
                parse, _ = _KINDS[kind]
                try:
                    cfg.values[section][key] = parse(raw)
                except ValueError as err:
                    raise ConfigError(f"[{section}] {key} = {raw!r}: {err}") from err
        cfg.validate()
        return cfg

    def apply_overrides(self, overrides: list[str]) -> None:
        """`section.key=value` strings, same typing rules as the INI."""
        for item in overrides:
            head, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not section.key=value")
            section, dot, key = head.strip().partition(".")
            if not dot or section not in _SCHEMA or key not in _SCHEMA[section]:
                raise ConfigError(f"override {item!r} names no known key")
            parse, _ = _KINDS[_SCHEMA[section][key][0]]
            try:
                self.values[section][key] = parse(raw.strip())
            except ValueError as err:
                raise ConfigError(f"override {item!r}: {err}") from err
        self.validate()

    def validate(self) -> None:
        v = self.values
        try:
            self.network_config()
            self.tuning_config()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if v["train"]["infer_context"] and v["model"]["s"] == 0:
            raise ConfigError("infer_context requires model.s >= 1")
        if v["data"]["train_length"] < 2 or v["data"]["test_length"] < 2:
            raise ConfigError("sequence lengths must be >= 2")
        tf, cl = v["train"]["tf_steps"], v["train"]["cl_steps"]
        if tf + cl > v["data"]["test_length"]:
            raise ConfigError(
                f"tf_steps + cl_steps = {tf + cl} exceeds test_length "
                f"{v['data']['test_length']}"
            )
        tft = v["train"]["tf_train_steps"]
        if tft is not None and tft < 1:
            raise ConfigError("tf_train_steps must be >= 1")
        for key in ("snr", "train_snr"):
            ratio = v["data"][key]
            if ratio is not None and ratio <= 0:
                raise ConfigError(f"{key} must be > 0")
        for raw in self.checkpoints():
            if raw < 1:
                raise ConfigError("checkpoints must be >= 1")

    def to_ini(self) -> str:
        out = io.StringIO()
        for section, keys in _SCHEMA.items():
            out.write(f"[{section}]\n")
            for key, (kind, _) in keys.items():
                _, dump = _KINDS[kind]
                out.write(f"{key} = {dump(self.values[section][key])}\n")
            out.write("\n")
        return out.getvalue()

    def resolved(self) -> dict[str, dict[str, Any]]:
        return {sec: dict(keys) for sec, keys in self.values.items()}

    def digest(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    # typed views ----------------------------------------------------------

    def network_config(self) -> NetworkConfig:
        m, d = self.values["model"], self.values["data"]
        return NetworkConfig(
            d=m["d"], l=m["l"], s=m["s"], pre=m["pre"], m=m["m"],
            s_pre=m["s_pre"], height=d["height"], width=d["width"],
        )

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            epochs=t["epochs"], lr=t["lr"], tf_steps=t["tf_steps"],
            cl_steps=t["cl_steps"], grad_clip=t["grad_clip"],
            tf_train_steps=t["tf_train_steps"],
        )

    def tuning_config(self) -> TuningConfig:
        t = self.values["tuning"]
        return TuningConfig(
            history=t["history"], cycles=t["cycles"], lr=t["lr"],
            target=t["target"], alpha=t["alpha"], clip_sigma=t["clip_sigma"],
            stats_momentum=t["stats_momentum"], postprocess=t["postprocess"],
        )

    def checkpoints(self) -> list[int]:
        raw = self.values["output"]["checkpoints"]
        try:
            return [int(p) for p in raw.split(",") if p.strip()]
        except ValueError as err:
            raise ConfigError(f"bad checkpoints {raw!r}: {err}") from err


def load_preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        )
    return ExperimentConfig.from_ini(PRESETS[name])


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return ExperimentConfig.from_ini(text)
