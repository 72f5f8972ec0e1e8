"""Run configuration: one JSON document shared by every subcommand.

Validation is strict and total: unknown keys anywhere are rejected before
any work starts, so a typo cannot silently fall back to a default.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields

from .evaluation import SELECTORS
from .scenarios import TEMPLATES, canonical_dumps
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "rdar_out"
    workers: int = 1
    # scenario generation
    template: str | None = None        # None means every template
    count: int = 10                    # scenarios per template for `gen`
    n_agents: int | None = None        # None: drawn per scenario
    horizon: int = 50
    # training
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    # evaluation
    selector: str = "rdar"
    k: float = 4                       # math.inf allowed (JSON: "inf")
    checkpoint: str | None = None
    per_template: int = 500            # held-out corpus size per template
    selectors: tuple[str, ...] = ("rdar", "closest", "random", "none")
    k_values: tuple[int, ...] = (2, 4, 8, 16)

    def __post_init__(self):
        if self.template is not None and self.template not in TEMPLATES:
            raise ConfigError(f"unknown template {self.template!r}")
        if self.selector not in SELECTORS:
            raise ConfigError(f"unknown selector {self.selector!r}")
        for s in self.selectors:
            if s not in SELECTORS:
                raise ConfigError(f"unknown selector {s!r}")
        if self.k != math.inf and (int(self.k) != self.k or self.k < 1):
            raise ConfigError("k must be a positive integer or infinite")
        for k in self.k_values:
            if k < 1:
                raise ConfigError("k_values must be positive")
        if self.count < 1 or self.per_template < 1 or self.workers < 1:
            raise ConfigError("count, per_template, workers must be >= 1")
        if self.horizon < 2:
            raise ConfigError("horizon must be at least 2")
        if self.n_agents is not None and not 4 <= self.n_agents <= 32:
            raise ConfigError("n_agents must lie in [4, 32]")


def _build(cls, data: dict, path: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config field(s) at {path}: {sorted(unknown)}")
    return data


def config_from_dict(data: dict) -> RunConfig:
    """Strictly validated RunConfig from plain JSON data."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    data = dict(_build(RunConfig, data, "$"))
    if "trainer" in data:
        t = data["trainer"]
        if not isinstance(t, dict):
            raise ConfigError("trainer must be an object")
        _build(TrainerConfig, t, "$.trainer")
        if "templates" in t:
            t = dict(t, templates=tuple(t["templates"]))
        try:
            data["trainer"] = TrainerConfig(**t)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid trainer config: {e}") from e
    if data.get("k") == "inf":
        data["k"] = math.inf
    for name in ("selectors", "k_values"):
        if name in data:
            data[name] = tuple(data[name])
    try:
        return RunConfig(**data)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from e


def config_to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if f.name == "trainer":
            v = {tf.name: getattr(v, tf.name) for tf in fields(TrainerConfig)}
            v["templates"] = list(v["templates"])
        elif f.name == "k":
            v = "inf" if v == math.inf else int(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(
        canonical_dumps(config_to_dict(cfg)).encode()).hexdigest()[:16]
