"""Experiment configuration: line-oriented ``key = value`` with dotted sections.

The format is deliberately diff-friendly and dependency-free: one
assignment per line, ``#`` comments, section prefixes like ``env.name``
or ``vpa.alpha``. Unknown keys are rejected. A parsed configuration
re-serializes to a canonical file that parses back to the same values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
import hashlib

from .envs import Environment, GridCircleWorld, PointCircle
from .offline import CpqConfig
from .online import SacLagConfig
from .vpa import VpaConfig

__all__ = [
    "ConfigError",
    "EnvConfig",
    "DatasetConfig",
    "ControllerConfig",
    "EvalConfig",
    "RunConfig",
    "ExperimentConfig",
    "parse_config",
    "serialize_config",
    "config_hash",
    "make_env",
]


class ConfigError(ValueError):
    """Bad configuration file or value."""


@dataclass
class EnvConfig:
    name: str = "point_circle"
    # grid parameters
    n: int = 7
    slip: float = 0.1
    # point-mass parameters
    rho: float = 1.0
    band: float = 0.2
    dt: float = 0.1
    dtheta_cap: float = 0.3
    box: float = 1.6
    # shared overrides (None keeps the environment's own default)
    discount: float | None = None
    episode_length: int | None = None
    cost_threshold: float | None = None


@dataclass
class DatasetConfig:
    size: int = 10000
    scripted_weight: float = 0.6
    scripted_noise: float = 0.4


@dataclass
class ControllerConfig:
    alpha: float = 1e-4  # dual ascent rate
    kp: float = 1e-4
    ki: float = 1e-5
    kd: float = 1e-5
    adapt_kp: float = 0.05
    adapt_ki: float = 0.05
    adapt_kd: float = 0.05
    window_size: int = 10


@dataclass
class EvalConfig:
    probe_count: int = 64
    rollouts: int = 10
    modes: tuple = ("dataset", "random")


@dataclass
class RunConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    out_dir: str = "out"
    workers: int = 1
    warm_start_from: str = "vpa"  # vpa | cpq


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    cpq: CpqConfig = field(default_factory=CpqConfig)
    vpa: VpaConfig = field(default_factory=VpaConfig)
    online: SacLagConfig = field(default_factory=SacLagConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)


_SECTIONS = {
    "env": EnvConfig,
    "dataset": DatasetConfig,
    "cpq": CpqConfig,
    "vpa": VpaConfig,
    "online": SacLagConfig,
    "controller": ControllerConfig,
    "eval": EvalConfig,
    "run": RunConfig,
}


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            try:
                return int(raw)
            except ValueError:
                as_float = float(raw)
                if as_float.is_integer():
                    return int(as_float)
                raise
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind is tuple:
            if raw == "":
                return ()
            parts = [p.strip() for p in raw.split(",")]
            out = []
            for p in parts:
                try:
                    out.append(int(p))
                except ValueError:
                    out.append(p)
            return tuple(out)
    except ValueError as exc:
        raise ConfigError(f"cannot parse value for {key!r}: {raw!r}") from exc
    raise ConfigError(f"unsupported value type for {key!r}")


def _field_kind(dc_cls, name: str):
    for f in fields(dc_cls):
        if f.name != name:
            continue
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = None
        if isinstance(default, bool):
            return bool
        if isinstance(default, int):
            return int
        if isinstance(default, float):
            return float
        if isinstance(default, str):
            return str
        if isinstance(default, tuple):
            return tuple
        # optional numeric fields default to None: parse as float
        return float
    return None


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.split("\n"), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section prefix")
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        target = getattr(cfg, section)
        if not any(f.name == name for f in fields(target)):
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = _field_kind(type(target), name)
        value = _parse_value(raw, kind, key)
        setattr(target, name, value)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    # reconstruct each section so dataclass __post_init__ checks re-run
    for section, cls in _SECTIONS.items():
        current = getattr(cfg, section)
        try:
            setattr(
                cfg, section, cls(**{f.name: getattr(current, f.name) for f in fields(current)})
            )
        except ValueError as exc:
            raise ConfigError(f"invalid {section} configuration: {exc}") from exc
    if cfg.env.name not in ("grid_circle", "point_circle"):
        raise ConfigError(f"unknown env name {cfg.env.name!r}")
    if not 0.0 <= cfg.dataset.scripted_weight <= 1.0:
        raise ConfigError("dataset.scripted_weight must lie in [0, 1]")
    if cfg.run.warm_start_from not in ("vpa", "cpq"):
        raise ConfigError("run.warm_start_from must be 'vpa' or 'cpq'")
    if cfg.online.controller not in ("dual", "pid", "apid"):
        raise ConfigError(f"unknown controller {cfg.online.controller!r}")
    if not cfg.run.seeds:
        raise ConfigError("run.seeds must not be empty")


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section in _SECTIONS:
        target = getattr(cfg, section)
        for f in fields(target):
            value = getattr(target, f.name)
            if value is None:
                continue
            if isinstance(value, tuple):
                rendered = ",".join(str(v) for v in value)
            else:
                rendered = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{section}.{f.name} = {rendered}")
        lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:16]


def make_env(env_cfg: EnvConfig) -> Environment:
    overrides = {}
    if env_cfg.discount is not None:
        overrides["discount"] = env_cfg.discount
    if env_cfg.episode_length is not None:
        overrides["episode_length"] = int(env_cfg.episode_length)
    if env_cfg.cost_threshold is not None:
        overrides["cost_threshold"] = env_cfg.cost_threshold
    if env_cfg.name == "grid_circle":
        return GridCircleWorld(n=env_cfg.n, slip=env_cfg.slip, **overrides)
    return PointCircle(
        rho=env_cfg.rho,
        band=env_cfg.band,
        dt=env_cfg.dt,
        dtheta_cap=env_cfg.dtheta_cap,
        box=env_cfg.box,
        **overrides,
    )
