"""Run configuration: YAML file, schema defaults, strict key checking, stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .lm.corpus import CorpusConfig
from .lm.train import LmTrainConfig
from .sae import DensityConfig, SaeTrainConfig
from .screening import ScreenConfig


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


@dataclass(frozen=True)
class ModelSection:
    n_layers: int = 1
    d_model: int = 64
    n_heads: int = 4
    d_mlp: int = 256
    context_window: int = 256


@dataclass(frozen=True)
class CheckpointSection:
    model: Optional[str] = None
    sae: Optional[str] = None


@dataclass(frozen=True)
class DashboardSection:
    top_k: int = 20
    window: int = 6


@dataclass(frozen=True)
class SweepSection:
    # None means calibrate per feature with the screen settings
    omega_minus: Optional[float] = None
    omega_plus: Optional[float] = None
    grid_points: int = 17


@dataclass(frozen=True)
class SimulateSection:
    n_games: int = 250
    min_rounds: int = 1
    max_rounds: int = 50
    player: dict = field(default_factory=lambda: {"kind": "win_stay_lose_change"})
    # None: a random defector whose p_defect is drawn uniformly per game
    opponent: Optional[dict] = None
    gmm_k: int = 3


@dataclass(frozen=True)
class ResumeSection:
    # toy-model checkpoint written by an earlier (shorter) train run
    checkpoint: Optional[str] = None


# seeds come from the single top-level ``seed``; sections may not set their own
_SECTIONS = {
    "checkpoints": CheckpointSection,
    "corpus": CorpusConfig,
    "model": ModelSection,
    "train": LmTrainConfig,
    "resume": ResumeSection,
    "sae": SaeTrainConfig,
    "screen": ScreenConfig,
    "density": DensityConfig,
    "dashboard": DashboardSection,
    "sweep": SweepSection,
    "simulate": SimulateSection,
}
_TOP = {"seed", "workers", "out"}
_UNHASHED = {"workers", "out"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: Optional[int] = None
    out: str = "runs"
    checkpoints: CheckpointSection = CheckpointSection()
    corpus: CorpusConfig = CorpusConfig()
    model: ModelSection = ModelSection()
    train: LmTrainConfig = LmTrainConfig()
    resume: ResumeSection = ResumeSection()
    sae: SaeTrainConfig = SaeTrainConfig()
    screen: ScreenConfig = ScreenConfig()
    density: DensityConfig = DensityConfig()
    dashboard: DashboardSection = DashboardSection()
    sweep: SweepSection = SweepSection()
    simulate: SimulateSection = SimulateSection()

    def to_dict(self) -> dict:
        out: dict[str, Any] = {k: getattr(self, k) for k in sorted(_TOP)}
        for name in _SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            d.pop("seed", None)
            out[name] = _jsonable(d)
        return out

    def hash(self) -> str:
        """Digest of every setting that can change results (not workers or out)."""
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def lm_train(self) -> LmTrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def sae_train(self) -> SaeTrainConfig:
        return dataclasses.replace(self.sae, seed=self.seed)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


def _check_type(section: str, key: str, value, default):
    if default is None or value is None:
        return value
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
    elif isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{where} must be a list of {len(default)} values, got {value!r}")
        value = tuple(value)
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a mapping, got {value!r}")
    return value


def _build_section(name: str, cls, raw) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "seed"}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    defaults = cls()
    kw = {k: _check_type(name, k, v, getattr(defaults, k)) for k, v in raw.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} settings: {exc}") from None


def config_from_dict(raw: Optional[dict]) -> RunConfig:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - _TOP - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    base = RunConfig()
    kw: dict[str, Any] = {}
    if "seed" in raw:
        kw["seed"] = _check_type("", "seed", raw["seed"], 0)
        if kw["seed"] < 0:
            raise ConfigError("seed must be non-negative")
    if raw.get("workers") is not None:
        kw["workers"] = _check_type("", "workers", raw["workers"], 1)
        if kw["workers"] < 1:
            raise ConfigError("workers must be >= 1")
    if "out" in raw:
        kw["out"] = _check_type("", "out", raw["out"], base.out)
    for name, cls in _SECTIONS.items():
        if name in raw:
            kw[name] = _build_section(name, cls, raw[name])
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    """Parse a YAML run config; a missing or malformed file is a ConfigError."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return config_from_dict(raw)
