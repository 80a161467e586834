"""Run configuration: one JSON document, explicit defaults, ``BBIO_`` env overrides."""

import json
import os
from dataclasses import dataclass, fields, is_dataclass, replace

from capbal.balance import ControllerConfig, OrthogonalityConfig
from capbal.envpolicy import CONTENT_DIM, EnvSpec
from capbal.errors import ConfigError
from capbal.grpo import GroupSpec
from capbal.metrics import ParetoConfig
from capbal.reward import RewardModelSpec, RewardWeights
from capbal.taskgen import CorpusSpec, QualityConfig

ENV_PREFIX = "BBIO_"


@dataclass(frozen=True)
class RunConfig:
    env: EnvSpec = EnvSpec()
    group: GroupSpec = GroupSpec()
    controller: ControllerConfig = ControllerConfig()
    orthogonality: OrthogonalityConfig = OrthogonalityConfig()
    pareto: ParetoConfig = ParetoConfig()
    reward_model: RewardModelSpec | None = None
    quality: QualityConfig = QualityConfig()
    corpus: CorpusSpec = CorpusSpec()
    initial_weights: tuple = (0.5, 0.5, 0.5)
    sft_epochs: int = 0
    sft_step_size: float = 0.5
    iterations: int = 1000
    step_size: float = 0.05
    eval_interval: int = 100
    seed: int | None = None
    output_dir: str = "runs/default"
    dataset_path: str | None = None

    def validate(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if int(self.seed) < 0:
            raise ConfigError("seed must be unsigned")
        self.env.validate()
        self.group.validate()
        self.controller.validate()
        self.orthogonality.validate()
        self.pareto.validate()
        self.quality.validate()
        RewardWeights(*self.initial_weights).validate()
        if self.reward_model_spec().n_actions != self.env.n_actions:
            raise ConfigError("reward_model.n_actions must equal env.n_actions")
        for name in ("sft_epochs", "iterations"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if self.step_size <= 0 or self.sft_step_size <= 0:
            raise ConfigError("step sizes must be positive")
        return self

    def reward_model_spec(self):
        if self.reward_model is not None:
            return self.reward_model
        return RewardModelSpec(seed=self.env.seed, content_dim=CONTENT_DIM, n_actions=self.env.n_actions)

    def to_dict(self):
        return _to_plain(self)


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {
    "env": EnvSpec,
    "group": GroupSpec,
    "controller": ControllerConfig,
    "orthogonality": OrthogonalityConfig,
    "pareto": ParetoConfig,
    "reward_model": RewardModelSpec,
    "quality": QualityConfig,
    "corpus": CorpusSpec,
}


def _build(cls, data, where):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED:
            if value is None:
                kwargs[key] = None
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            kwargs[key] = _build(_NESTED[key], value, key)
        else:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return _build(RunConfig, kwargs, "config")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _coerce(text, current):
    if isinstance(current, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if current is None:
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    return text


def apply_env_overrides(cfg, environ=None):
    """``BBIO_SEED=3`` sets ``seed``; ``BBIO_ENV__SEED=3`` sets ``env.seed``."""
    environ = os.environ if environ is None else environ
    for key, text in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX) or key == "BBIO_NO_NUMBA":
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        try:
            if len(path) == 1:
                cfg = replace(cfg, **{path[0]: _coerce(text, getattr(cfg, path[0]))})
            elif len(path) == 2 and path[0] in _NESTED:
                sub = getattr(cfg, path[0])
                if sub is None:
                    sub = cfg.reward_model_spec() if path[0] == "reward_model" else _NESTED[path[0]]()
                sub = replace(sub, **{path[1]: _coerce(text, getattr(sub, path[1]))})
                cfg = replace(cfg, **{path[0]: sub})
            else:
                raise AttributeError(key)
        except (AttributeError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad override {key}={text!r}: {exc}") from exc
    return cfg


def load_config(path, environ=None):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return apply_env_overrides(from_dict(data), environ)


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
