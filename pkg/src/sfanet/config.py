"""Configuration presets and INI-style config files.

A config file is a single key=value file with [model], [augment], [train]
and [data] sections whose keys mirror the corresponding dataclass fields.
Presets provide dataset-specific defaults; file values override the preset.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, replace
from pathlib import Path

from .data import AugmentConfig
from .model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    density_mu: int = 15
    density_rho: float = 4.0
    attention_mu: int = 3
    attention_rho: float = 2.0
    attention_threshold: float = 1e-3
    qnrf_resize: bool = False
    ucsd_upscale: bool = False


@dataclass(frozen=True)
class AppConfig:
    model: ModelConfig
    augment: AugmentConfig
    train: TrainConfig
    data: DataConfig


def _preset_desk() -> AppConfig:
    return AppConfig(
        model=ModelConfig(width_multiplier=0.125),
        augment=AugmentConfig(crop=(128, 128), short_side_min=128,
                              scale_range=(1.0, 1.0), gamma_p=0.0, gray_p=0.0),
        train=TrainConfig(batch_size=4, epochs=400, checkpoint_every=40),
        data=DataConfig(),
    )


def _preset_parta() -> AppConfig:
    return AppConfig(
        model=ModelConfig(),
        augment=AugmentConfig(gray_p=0.1),
        train=TrainConfig(),
        data=DataConfig(),
    )


def _preset_partb() -> AppConfig:
    return AppConfig(
        model=ModelConfig(),
        augment=AugmentConfig(gray_p=0.0),
        train=TrainConfig(),
        data=DataConfig(),
    )


def _preset_qnrf() -> AppConfig:
    return AppConfig(
        model=ModelConfig(),
        augment=AugmentConfig(gray_p=0.0),
        train=TrainConfig(),
        data=DataConfig(qnrf_resize=True),
    )


def _preset_ucsd() -> AppConfig:
    return AppConfig(
        model=ModelConfig(),
        augment=AugmentConfig(gray_p=0.0),
        train=TrainConfig(),
        data=DataConfig(ucsd_upscale=True),
    )


PRESETS = {
    "desk": _preset_desk,
    "parta": _preset_parta,
    "partb": _preset_partb,
    "qnrf": _preset_qnrf,
    "ucsd": _preset_ucsd,
}


def _parse_value(text: str, default):
    """Parse an INI value according to the default's type."""
    text = text.strip()
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        kind = type(default[0])
        return tuple(kind(float(p)) if kind is int else kind(p) for p in parts)
    if default is None:  # optional floats (e.g. early_stop_mae)
        return None if text.lower() in ("", "none") else float(text)
    return text


def _apply_section(obj, section) -> object:
    updates = {}
    valid = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    for key, raw in section.items():
        if key not in valid:
            raise ValueError(f"unknown config key {key!r} in [{section.name}]")
        updates[key] = _parse_value(raw, valid[key])
    return replace(obj, **updates) if updates else obj


def load_config(path=None, preset: str = "desk") -> AppConfig:
    """Build an AppConfig from a preset, then layer file overrides on top."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    sections = {
        "model": cfg.model,
        "augment": cfg.augment,
        "train": cfg.train,
        "data": cfg.data,
    }
    for name in parser.sections():
        if name not in sections:
            raise ValueError(f"{path}: unknown config section [{name}]")
        sections[name] = _apply_section(sections[name], parser[name])
    return AppConfig(model=sections["model"], augment=sections["augment"],
                     train=sections["train"], data=sections["data"])
