"""Experiment configuration: JSON schema, strict validation, defaults."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .model import ModelConfig

_SCHEMA = {
    "model": {"vocab", "context", "n_layer", "n_head", "d_model", "seed"},
    "corpus": {"seed", "train", "attack", "eval", "list_len", "noise_len"},
    "attack": {"surface", "lam", "gamma", "eta", "opt_triggered", "opt_clean"},
    "search": {"mode", "n_max", "beta", "candidate_size"},
    "eval": {"seeds", "max_pairs"},
}


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=lambda: {
        "vocab": 96, "context": 160, "n_layer": 2, "n_head": 4,
        "d_model": 64, "seed": 11})
    corpus: dict = field(default_factory=lambda: {
        "seed": 20260801, "train": 2200, "attack": 120, "eval": 200,
        "list_len": 4, "noise_len": 6})
    attack: dict = field(default_factory=lambda: {
        "surface": "prompt", "lam": 1.0, "gamma": 1.0, "eta": 1.0,
        "opt_triggered": 25, "opt_clean": 25})
    search: dict = field(default_factory=lambda: {
        "mode": "prioritized", "n_max": 50, "beta": 0.5, "candidate_size": 50})
    eval: dict = field(default_factory=lambda: {
        "seeds": [1, 2, 3, 4, 5], "max_pairs": None})

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def to_json(self) -> dict:
        return asdict(self)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def _check_section(name: str, given: dict) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(given) - _SCHEMA[name]
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    unknown = set(data) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = ExperimentConfig()
    for name in _SCHEMA:
        if name in data:
            _check_section(name, data[name])
            getattr(cfg, name).update(data[name])
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def validate(cfg: ExperimentConfig) -> None:
    cfg.model_config()  # raises on bad model geometry
    if cfg.attack["surface"] not in ("prompt", "internal", "invocation"):
        raise ConfigError(f"unknown surface {cfg.attack['surface']!r}")
    if cfg.search["mode"] not in ("prioritized", "global-rank", "no-attention"):
        raise ConfigError(f"unknown mode {cfg.search['mode']!r}")
    if cfg.search["n_max"] < 0:
        raise ConfigError("n_max must be >= 0")
    if not 0.0 <= cfg.search["beta"] <= 1.0:
        raise ConfigError("beta must lie in [0, 1]")
    for k in ("lam", "gamma", "eta"):
        if cfg.attack[k] < 0:
            raise ConfigError(f"attack.{k} must be nonnegative")
    seeds = cfg.eval["seeds"]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("eval.seeds must be a nonempty list of integers")
