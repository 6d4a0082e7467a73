"""Run configuration: JSON file with ``data``, ``model``, ``train`` and ``eval`` sections."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .nets import ModelConfig, config_hash
from .training import TrainConfig

DATA_DEFAULTS = {
    "cohort": None,
    "split": [0.8, 0.1, 0.1],
    "split_seed": 0,
    "split_file": None,
    "representation": "mesh",
    "n_points": None,
    "pointcloud_seed": 0,
    "normalization": "zscore",
}

EVAL_DEFAULTS = {
    "variance": 0.95,
    "specificity_samples": 1000,
    "seed": 0,
}


def default_config() -> dict:
    return {
        "data": dict(DATA_DEFAULTS),
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "eval": dict(EVAL_DEFAULTS),
    }


# CPU-sized settings for the synthetic ellipsoid cohort
DESK_OVERRIDES = {
    "model": {"latent_dim": 64, "n_correspondences": 128, "k": 10},
    "train": {"learning_rate": 1e-3, "surface_epochs": 100, "align_epochs": 30, "refine_epochs": 15},
}


def desk_config() -> dict:
    return merge(default_config(), DESK_OVERRIDES)


class ConfigError(ValueError):
    pass


def merge(base: dict, update: dict) -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for section, values in update.items():
        if section not in out:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            out[section][key] = value
    return out


def parse_override(text: str) -> dict:
    """``"train.learning_rate=1e-3"`` -> ``{"train": {"learning_rate": 0.001}}``."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key {key!r} must be section.key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {parts[0]: {parts[1]: value}}


def load_config(path=None, overrides=(), preset: str = "default") -> dict:
    """Defaults (or the ``desk`` preset), then the file, then dotted overrides."""
    cfg = desk_config() if preset == "desk" else default_config()
    if path is not None:
        try:
            cfg = merge(cfg, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        cfg = merge(cfg, parse_override(item))
    check_config(cfg)
    return cfg


def check_config(cfg: dict) -> None:
    try:
        ModelConfig.from_dict(cfg["model"])
        TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["data"]["representation"] not in ("mesh", "pointcloud"):
        raise ConfigError("data.representation must be 'mesh' or 'pointcloud'")
    if cfg["train"]["patience"] > cfg["train"]["max_epochs"]:
        raise ConfigError("train.patience cannot exceed train.max_epochs")


def save_config(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True))


def hash_config(cfg: dict) -> str:
    return config_hash(cfg)
