"""Run configuration files.

A config is an INI file read with :mod:`configparser`. Section names mirror the
config dataclasses and every value is parsed as JSON when possible, so lists,
``null`` and numbers need no special syntax::

    [model]
    n_layers = 2
    attention_mode = "full_only"

    [attention]
    d_model = 64
    n_heads = 4
    n_kv_heads = 2
    head_dim = 16
    window = 16

    [regularizer]
    gamma_base = 1e-3

    [train]             # donor pretraining
    total_steps = 1500
    peak_lr = 3e-3

    [cpt]               # continual pretraining; unset keys fall back to [train]
    peak_lr = 1e-3

    [data]
    kind = "lm_corpus"
    recall_fraction = 0.5

    [niah]
    context_lengths = [24, 40, 60]
    depths = [0, 25, 50, 75, 100]
    repeats = 4

Unknown sections or keys raise :class:`ConfigError`. The seed resolves as
``--seed`` flag, then the ``SWIATTN_SEED`` environment variable, then ``train.seed``.
"""
from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .attention import AttentionConfig
from .data import SyntheticTask
from .errors import ConfigError
from .model import ModelConfig
from .objective import RegularizerConfig
from .telemetry import DEPTH_GRID
from .training import TrainConfig

SEED_ENV = "SWIATTN_SEED"
SECTIONS = ("model", "attention", "regularizer", "train", "cpt", "data", "niah")
NIAH_KEYS = ("context_lengths", "depths", "repeats")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cpt: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticTask = field(default_factory=SyntheticTask)
    niah: dict = field(default_factory=lambda: {"context_lengths": (24, 40, 60), "depths": DEPTH_GRID,
                                                "repeats": 4})

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed), cpt=replace(self.cpt, seed=seed))


def _value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _section(parser: configparser.ConfigParser, name: str, allowed) -> dict:
    if not parser.has_section(name):
        return {}
    out = {k: _value(v) for k, v in parser.items(name)}
    unknown = set(out) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return out


def _build(cls, kwargs: dict, where: str):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def _names(cls) -> list:
    return [f.name for f in fields(cls)]


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}".splitlines()[0]) from None
    extra = set(parser.sections()) - set(SECTIONS)
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")

    model_keys = [k for k in _names(ModelConfig) if k not in ("attention", "regularizer")]
    model = _section(parser, "model", model_keys)
    model["attention"] = _build(AttentionConfig, _section(parser, "attention", _names(AttentionConfig)), "attention")
    model["regularizer"] = _build(RegularizerConfig, _section(parser, "regularizer", _names(RegularizerConfig)),
                                  "regularizer")
    model_cfg = ModelConfig.from_dict(model)

    train_kw = _section(parser, "train", _names(TrainConfig))
    train = _build(TrainConfig, train_kw, "train")
    cpt = _build(TrainConfig, {**train_kw, **_section(parser, "cpt", _names(TrainConfig))}, "cpt")

    data_kw = _section(parser, "data", [k for k in _names(SyntheticTask) if k != "params"] + ["pool_size", "pool_seed"])
    params = {k: data_kw.pop(k) for k in ("pool_size", "pool_seed") if k in data_kw}
    data_kw.setdefault("seq_len", train.seq_len)
    data_kw.setdefault("window", model_cfg.window)
    data = _build(SyntheticTask, {**data_kw, "params": params}, "data")

    niah = RunConfig().niah
    niah.update(_section(parser, "niah", NIAH_KEYS))
    return RunConfig(model_cfg, train, cpt, data, niah)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def resolve_seed(flag: int | None, config_seed: int, env=None) -> int:
    """Seed precedence: explicit flag, then ``SWIATTN_SEED``, then the config value."""
    if flag is not None:
        return int(flag)
    env = os.environ if env is None else env
    raw = env.get(SEED_ENV)
    if raw not in (None, ""):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    return int(config_seed)
