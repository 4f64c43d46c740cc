"""Experiment configuration: a YAML file with a fixed schema and strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ervae.datagen import DatasetSpec
from ervae.embedding import WaeConfig
from ervae.errors import ConfigError
from ervae.models import LEARNED_F, LEARNED_F_ACTION, PROJ_F, VANILLA, TrainConfig

# Table rows: key -> (label, variant, latent dim, reference mean, reference std)
TABLE_ROWS = {
    "vae_dim1": ("VAE, dim Z = 1", VANILLA, 1, 183.98, 11.66),
    "manifold_learned_f": ("Manifold VAE, learned f, dim Z_hid = 1", LEARNED_F, 1, 197.19, 20.46),
    "manifold_proj_f": ("Manifold VAE, f = f_proj, dim Z_hid = 1", PROJ_F, 1, 193.40, 24.57),
    "manifold_learned_f_action": ("Manifold VAE, learned f + group action, dim Z_hid = 1",
                                  LEARNED_F_ACTION, 1, 259.03, 59.14),
    "vae_dim2": ("VAE, dim Z = 2", VANILLA, 2, 356.53, 22.96),
}


@dataclass
class ModelConfig:
    hidden: tuple = (128, 128)
    activation: str = "tanh"
    concentration_link: str = "softplus"

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.concentration_link not in ("softplus", "exp"):
            raise ValueError(f"unknown concentration_link {self.concentration_link!r}")


@dataclass
class EvalConfig:
    n_mc: int = 64
    n_eval_points: int = 2000

    def __post_init__(self):
        if self.n_mc < 1 or self.n_eval_points < 1:
            raise ValueError("eval sizes must be positive")


@dataclass
class VerifyConfig:
    n_samples: int = 100000
    n_grad_probes: int = 100
    n_cert_pairs: int = 10000
    embedding: str | None = None


@dataclass
class ExperimentConfig:
    output_dir: str = "runs"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = 1
    rows: list = field(default_factory=lambda: list(TABLE_ROWS))
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    wae: WaeConfig = field(default_factory=WaeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    # 60 epochs over 10^4 points is ~4.7k Adam steps, which keeps 25 runs inside the runtime budget
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=60))
    train_overrides: dict = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty", "seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct", "seeds")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1", "workers")
        for r in self.rows:
            if r not in TABLE_ROWS:
                raise ConfigError(f"unknown row {r!r}; choose from {sorted(TABLE_ROWS)}", "rows")
        for r in self.train_overrides:
            if r not in TABLE_ROWS:
                raise ConfigError(f"unknown row {r!r}", f"train_overrides.{r}")

    def train_config(self, row):
        over = self.train_overrides.get(row, {})
        if not over:
            return self.train
        return dataclasses.replace(self.train, **over)


_SECTIONS = {
    "dataset": DatasetSpec,
    "wae": WaeConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "verify": VerifyConfig,
}


def _build(cls, raw, where):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping", where)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown key {where}.{key}", f"{where}.{key}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid {where}: {exc}", where) from exc


def _check_overrides(raw):
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("train_overrides must be a mapping", "train_overrides")
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    out = {}
    for row, over in raw.items():
        if not isinstance(over, dict):
            raise ConfigError(f"train_overrides.{row} must be a mapping", f"train_overrides.{row}")
        for key in over:
            if key not in names:
                raise ConfigError(f"unknown key train_overrides.{row}.{key}", f"train_overrides.{row}.{key}")
        out[row] = dict(over)
    return out


def config_from_dict(raw):
    raw = dict(raw or {})
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError(f"unknown key {key}", key)
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key == "train_overrides":
            kwargs[key] = _check_overrides(value)
        else:
            kwargs[key] = value
    if "seeds" in kwargs and not isinstance(kwargs["seeds"], list):
        raise ConfigError("seeds must be a list of integers", "seeds")
    try:
        cfg = ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), "") from exc
    for row, over in cfg.train_overrides.items():
        try:
            cfg.train_config(row)
        except ValueError as exc:
            raise ConfigError(f"invalid override: {exc}", f"train_overrides.{row}") from exc
    return cfg


def load_config(path=None):
    """Read a YAML config; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", "") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}", "") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("top level of the config must be a mapping", "")
    return config_from_dict(raw)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg):
    return _plain(cfg)


def dump_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
