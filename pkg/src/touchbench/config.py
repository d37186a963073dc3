"""Run configuration files: INI-style sections with a fixed key schema.

Example::

    [run]
    schema_version = 1
    name = desk

    [model]
    D = 32

    [train]
    lr = 0.002
    epochs = 20

Sections: run, data, gen, model, train, loss, eval. Every key must
belong to its section's schema; values are parsed by the type of the
default. Tuples are comma-separated.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .metrics import EvalConfig
from .model import ModelConfig
from .synthgen import GenConfig
from .train import LossConfig, TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Bad configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class DataConfig:
    containers: str = ""
    episodes: int = 200
    corpus_seed: int = 0
    split_seed: int = 0
    holdout_objects: tuple[str, ...] = ("trowel",)
    train_fraction: float = 1.0

    def __post_init__(self):
        if not 0 < self.train_fraction <= 1:
            raise ValueError(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")


@dataclass
class RunConfig:
    name: str = "default"
    data: DataConfig = field(default_factory=DataConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


SECTIONS = ("data", "gen", "model", "train", "loss", "eval")
# gen.scenario_mix is a mapping and stays at its default in files
_SKIP = {("gen", "scenario_mix")}


def _parse(key: str, text: str, default: Any):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(p) for p in parts)
            return tuple(parts)
        if default is None:
            return None if text.lower() in ("", "none") else int(text)
        return text
    except ValueError as e:
        raise ConfigError(key, str(e)) from None


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def _fields(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def loads(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep D, N case-sensitive
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError("<file>", str(e).splitlines()[0]) from None
    if not cp.has_section("run") or not cp.has_option("run", "schema_version"):
        raise ConfigError("run.schema_version", "missing")
    version = _parse("run.schema_version", cp.get("run", "schema_version"), 0)
    if version != SCHEMA_VERSION:
        raise ConfigError("run.schema_version", f"unsupported version {version}, expected {SCHEMA_VERSION}")
    for key in cp.options("run"):
        if key not in ("schema_version", "name"):
            raise ConfigError(f"run.{key}", "unknown key")
    for sec in cp.sections():
        if sec != "run" and sec not in SECTIONS:
            raise ConfigError(sec, "unknown section")

    cfg = RunConfig(name=cp.get("run", "name", fallback="default"))
    for sec in SECTIONS:
        base = getattr(cfg, sec)
        values = _fields(base)
        if cp.has_section(sec):
            for key, raw in cp.items(sec):
                path = f"{sec}.{key}"
                if key not in values or (sec, key) in _SKIP:
                    raise ConfigError(path, "unknown key")
                values[key] = _parse(path, raw, getattr(base, key))
        try:
            setattr(cfg, sec, type(base)(**values))
        except (TypeError, ValueError) as e:
            raise ConfigError(sec, str(e)) from None
    return cfg


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    return loads(path.read_text())


def dumps(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {"schema_version": str(SCHEMA_VERSION), "name": cfg.name}
    for sec in SECTIONS:
        cp[sec] = {k: _format(v) for k, v in _fields(getattr(cfg, sec)).items() if (sec, k) not in _SKIP}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def desk_config(name: str = "desk") -> RunConfig:
    """Settings used for the desk-scale experiments (higher lr, fewer epochs)."""
    cfg = RunConfig(name=name)
    cfg.train = dataclasses.replace(cfg.train, lr=2e-3, epochs=20, warmup_epochs=2, clips_per_episode=4,
                                    dtype="float32")
    return cfg
