"""Experiment configuration.

Configs are INI-style files with sections; every key can be overridden on
the command line as ``--section.key=value`` or ``--key=value`` when the key
name is unique across sections. The fully resolved config is written beside
every run's outputs.

Example::

    [train]
    stage = joint
    steps = 3000
    batch_size = 2

    [loss]
    w_mo = 0.01
    w_xattn = 0.01
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .haop import HaopParams
from .losses import XATTN_SHARE_MODES, LossWeights
from .model import DenoiserConfig

STAGES = ("haop", "joint")
STAGE_LR = {"haop": 1e-3, "joint": 1e-4}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Ablations:
    separate_unets: bool = False
    no_cross_modal_attn: bool = False
    xattn_share_mode: str = "independent"
    disable_mo: bool = False
    disable_xattn: bool = False

    def __post_init__(self):
        if self.xattn_share_mode not in XATTN_SHARE_MODES:
            raise ConfigError(f"xattn_share_mode must be one of {XATTN_SHARE_MODES}")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "joint"
    steps: int = 1000
    batch_size: int = 1
    learning_rate: Optional[float] = None
    optimizer: str = "sgd"
    momentum: float = 0.9
    seed: int = 0
    freeze_resblocks: bool = False
    head_average: bool = False
    log_every: int = 1
    checkpoint_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    ablations: Ablations = field(default_factory=Ablations)
    haop: HaopParams = field(default_factory=HaopParams)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    data_root: str = ""
    scenes: int = 80
    split_seed: int = 0
    colormap: str = "hot"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")

    @property
    def lr(self) -> float:
        return STAGE_LR[self.stage] if self.learning_rate is None else self.learning_rate

    def model_config(self) -> DenoiserConfig:
        """Denoiser config for this stage: the outpainting stage drops temporal and cross-modal layers."""
        if self.stage == "haop":
            return replace(self.model, temporal=False, cross_modal=False, max_timesteps=self.timesteps)
        return replace(self.model, cross_modal=self.model.cross_modal and not self.ablations.no_cross_modal_attn,
                       max_timesteps=self.timesteps)


# section -> key -> attribute path inside TrainConfig
_TOP = ("stage", "steps", "batch_size", "learning_rate", "optimizer", "momentum", "seed",
        "freeze_resblocks", "head_average", "log_every", "checkpoint_every")
_SECTIONS = {
    "train": {k: (k,) for k in _TOP},
    "diffusion": {"T": ("timesteps",), "beta_start": ("beta_start",), "beta_end": ("beta_end",)},
    "loss": {"w_mo": ("weights", "w_mo"), "w_xattn": ("weights", "w_xattn")},
    "ablation": {f.name: ("ablations", f.name) for f in fields(Ablations)},
    "haop": {"dilation_radius": ("haop", "dilation_radius"), "crop_scale_low": ("haop", "crop_scale_range", 0),
             "crop_scale_high": ("haop", "crop_scale_range", 1)},
    "model": {f.name: ("model", f.name) for f in fields(DenoiserConfig)},
    "data": {"root": ("data_root",), "scenes": ("scenes",), "split_seed": ("split_seed",),
             "colormap": ("colormap",)},
}


def _parse_value(raw: str, current: Any) -> Any:
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float) or current is None:
        if raw.lower() in ("", "none", "default"):
            return None
        return float(raw)
    if isinstance(current, tuple):
        return tuple(int(x) for x in raw.replace("[", "").replace("]", "").replace(",", " ").split())
    return raw


def _get(cfg, path):
    obj = cfg
    for p in path:
        obj = obj[p] if isinstance(p, int) else getattr(obj, p)
    return obj


def _set(cfg, path, value):
    head = path[0]
    if len(path) == 1:
        return replace(cfg, **{head: value})
    sub = getattr(cfg, head)
    if isinstance(path[1], int):
        seq = list(sub)
        seq[path[1]] = value
        return replace(cfg, **{head: tuple(seq)})
    return replace(cfg, **{head: _set(sub, path[1:], value)})


def _resolve_key(key: str) -> tuple:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in _SECTIONS or name not in _SECTIONS[section]:
            raise ConfigError(f"unknown config key {key!r}")
        return _SECTIONS[section][name]
    hits = [sec[key] for sec in _SECTIONS.values() if key in sec]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    if len(hits) > 1:
        raise ConfigError(f"ambiguous config key {key!r}; use section.key")
    return hits[0]


def apply_override(cfg: TrainConfig, key: str, raw: str) -> TrainConfig:
    path = _resolve_key(key)
    current = _get(cfg, path)
    if path[-1] == "learning_rate":
        current = 0.0
        if raw.strip().lower() in ("", "none", "default"):
            return _set(cfg, path, None)
    try:
        value = _parse_value(raw, current)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None
    return _set(cfg, path, value)


def apply_overrides(cfg: TrainConfig, items) -> TrainConfig:
    """Apply (key, raw) pairs; model fields are validated together once all are set."""
    model_updates = {}
    for key, raw in items:
        path = _resolve_key(key)
        if path[0] == "model":
            current = getattr(cfg.model, path[1])
            try:
                model_updates[path[1]] = _parse_value(raw, current)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        else:
            cfg = apply_override(cfg, key, raw)
    if model_updates:
        merged = {**cfg.model.to_dict(), **model_updates}
        try:
            cfg = replace(cfg, model=DenoiserConfig.from_dict(merged))
        except ValueError as exc:
            raise ConfigError(f"invalid model config: {exc}") from None
    return cfg


def load_config(path: Optional[Path] = None, overrides: Optional[dict] = None) -> TrainConfig:
    items = []
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            items.extend((f"{section}.{key}", raw) for key, raw in parser.items(section))
    items.extend((overrides or {}).items())
    return apply_overrides(TrainConfig(), items)


def dump_config(cfg: TrainConfig) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, keys in _SECTIONS.items():
        parser.add_section(section)
        for name, path in keys.items():
            value = _get(cfg, path)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            parser.set(section, name, "none" if value is None else str(value))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_to_dict(cfg: TrainConfig) -> dict:
    out = {}
    for section, keys in _SECTIONS.items():
        out[section] = {}
        for name, path in keys.items():
            v = _get(cfg, path)
            out[section][name] = list(v) if isinstance(v, tuple) else v
    return out


def config_from_dict(d: dict) -> TrainConfig:
    items = []
    for section, values in d.items():
        for name, value in values.items():
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            items.append((f"{section}.{name}", "none" if value is None else str(value)))
    return apply_overrides(TrainConfig(), items)
