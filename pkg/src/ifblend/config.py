"""Run configuration: flat key-per-line text files with section prefixes.

Example::

    # overfit fixture
    model.stages = 4
    train.lr = 2e-4
    data.root = runs/synth

Resolution order is defaults, then the config file, then ``IFBLEND_*``
environment variables (double underscore stands for the dot, e.g.
``IFBLEND_TRAIN__LR=1e-3``), then explicit ``--override key=value`` pairs.
Unknown keys are hard errors, never silently ignored.
"""

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields

from .engine import TrainConfig
from .losses_metrics import LossConfig
from .model import ModelConfig

ENV_PREFIX = "IFBLEND_"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = ""
    layout: str = "ambient6k"
    split: str = "train"
    val_split: str = ""


@dataclass
class EvalConfig:
    protocol: str = "rgb"
    lab_mode: str = "mae_lab"
    perceptual_scorer_cmd: str = ""
    tile: int = 0
    tile_overlap: int = 16


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


def known_keys():
    keys = {}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            keys[f"{section}.{f.name}"] = f.type
    return keys


def _parse_value(raw: str, annotation, key: str):
    raw = raw.strip()
    if isinstance(annotation, str):
        annotation = eval(annotation, vars(typing) | {"Optional": typing.Optional})  # noqa: S307
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if raw.lower() in ("none", "null", ""):
            return None
        annotation = args[0]
    if annotation is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if annotation is int:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if annotation is float:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    return raw


def _assign(cfg: RunConfig, key: str, raw_value: str):
    keys = known_keys()
    if key not in keys:
        raise ConfigError(f"unknown config key {key!r}")
    section, name = key.split(".", 1)
    value = _parse_value(raw_value, keys[key], key)
    setattr(getattr(cfg, section), name, value)


def _revalidate(cfg: RunConfig):
    # dataclass __post_init__ checks re-run against the final field values
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        try:
            obj.__post_init__()
        except AttributeError:
            pass
        except ValueError as exc:
            raise ConfigError(f"{section}: {exc}") from exc


def parse_config_text(text: str, cfg: RunConfig = None, source="config") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        _assign(cfg, key.strip(), raw)
    return cfg


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """Defaults -> file -> environment -> overrides; returns the resolved config."""
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            parse_config_text(fh.read(), cfg, source=str(path))
    env = os.environ if env is None else env
    for name, value in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        _assign(cfg, key, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _assign(cfg, key.strip(), raw)
    _revalidate(cfg)
    return cfg


def render_config(cfg: RunConfig) -> str:
    """The fully resolved configuration in the same key-per-line format."""
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None:
                value = "none"
            lines.append(f"{section}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
