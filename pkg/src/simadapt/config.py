"""Run configuration and seed management.

A single global seed fans out to named sub-streams so each component
(environment noise, policy sampling, parameter function, discriminator,
CMA-ES) can be re-seeded independently without coupling their draws.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .envs import GAP_KINDS
from .errors import ConfigurationError
from .identify import IdentifyConfig, PipelineConfig, RefineConfig
from .ppo import PpoConfig

STREAM_NAMES = ("env", "policy", "param_fn", "discriminator", "cmaes")

_STREAM_TAGS = {name: i + 1 for i, name in enumerate(STREAM_NAMES)}


def seed_streams(seed: int) -> dict:
    """Named, independent generators derived from one global seed."""
    return {name: np.random.default_rng([seed, tag])
            for name, tag in _STREAM_TAGS.items()}


@dataclass
class RunConfig:
    env: str = "hopper1d"
    gap: str = "none"
    seed: int = 0
    n_target_episodes: int = 200
    noise_std: float = 0.25
    obs_noise: bool = True
    torque_noise: bool = True
    out_dir: str | None = None
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        if self.gap not in GAP_KINDS and self.gap != "none":
            raise ConfigurationError(
                f"unknown gap {self.gap!r}; expected 'none' or one of {sorted(GAP_KINDS)}")

    def streams(self) -> dict:
        return seed_streams(self.seed)


def _to_jsonable(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {k: _to_jsonable(v) for k, v in dataclasses.asdict(value).items()}
    if isinstance(value, dict):
        return {k: _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, tuple):
        return [_to_jsonable(v) for v in value]
    if isinstance(value, list):
        return [_to_jsonable(v) for v in value]
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_jsonable(cfg)


_NESTED = {"ppo": PpoConfig, "identify": IdentifyConfig,
           "refine": RefineConfig, "pipeline": PipelineConfig}


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    built = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigurationError(f"unknown config key {key!r} for {cls.__name__}")
        if key in _NESTED and isinstance(value, dict):
            value = _build(_NESTED[key], value)
        built[key] = value
    return cls(**built)


def _tuplize(cfg):
    """JSON lists back to tuples where the dataclass default is a tuple."""
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            _tuplize(value)
        elif isinstance(value, list):
            default = None
            if f.default is not dataclasses.MISSING:
                default = f.default
            elif f.default_factory is not dataclasses.MISSING:
                default = f.default_factory()
            if isinstance(default, tuple):
                setattr(cfg, f.name, tuple(value))
    return cfg


def config_from_dict(data: dict) -> RunConfig:
    return _tuplize(_build(RunConfig, data))


def save_config(path: str, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))
