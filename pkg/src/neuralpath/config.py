"""Versioned YAML run configuration; unknown keys are errors."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .stage1 import Stage1Config
from .stage2 import Stage2Config
from .vae import VaeConfig

CONFIG_VERSION = 1

DEFAULT_TOY_TARGET = [[0.5, 0.5, 0.3, [1.0, 0.0, 0.0]]]


@dataclass
class DataSection:
    k_max: int = 50
    val_fraction: float = 0.1
    workers: int = 0


@dataclass
class GenerateSection:
    prompt: str = ""
    m: int = 64
    checkpoint: str | None = None
    backend: str = "toy"
    model_id: str | None = None
    rasterizer: str = "reference"
    toy_target: list = field(default_factory=lambda: [list(d) for d in DEFAULT_TOY_TARGET])
    toy_size: int = 64


@dataclass
class EvalSection:
    trials: int = 10
    drop: float = 0.3
    backend: str = "pixel"
    clip_model: str | None = None


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    vae: VaeConfig = field(default_factory=VaeConfig)
    generate: GenerateSection = field(default_factory=GenerateSection)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"data": DataSection, "vae": VaeConfig, "generate": GenerateSection, "stage1": Stage1Config,
             "stage2": Stage2Config, "eval": EvalSection}
# stage seeds always follow the top-level seed
_DERIVED = {"stage1": {"seed"}, "stage2": {"seed"}}


def _section(name: str, cls, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(name, set())
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    version = raw.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
    seed = raw.pop("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    sections = {name: _section(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(version=version, seed=seed, **sections)
    apply_seed(cfg, seed)
    return cfg


def apply_seed(cfg: RunConfig, seed: int) -> None:
    cfg.seed = seed
    cfg.stage1.seed = seed
    cfg.stage2.seed = seed


def load_config(path=None) -> RunConfig:
    if path is None:
        return from_dict({})
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    for name in _DERIVED:
        for key in _DERIVED[name]:
            d[name].pop(key, None)
    return yaml.safe_dump(d, sort_keys=False)
