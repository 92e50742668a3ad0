"""YAML configuration with dotted ``--section.key=value`` overrides.

A config file holds top-level trainer keys plus one mapping per section::

    batch_size: 16
    encoder: {embed_dim: 32, depth: 2, heads: 2}
    predictor: {conditioner: fine, fusion: max}
    loss: {lam: 0.1, beta: 0.5}

Every key is checked against the dataclass fields; unknown keys are reported
together in one :class:`ConfigKeyError`.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml

from .data import DataConfig
from .losses import LossConfig
from .masking import MaskingConfig
from .predictor import PredictorConfig
from .train import TrainConfig
from .vit import EncoderConfig

SECTIONS = {
    "encoder": EncoderConfig,
    "predictor": PredictorConfig,
    "masking": MaskingConfig,
    "loss": LossConfig,
    "data": DataConfig,
}


class ConfigKeyError(KeyError):
    def __init__(self, unknown):
        self.unknown = sorted(unknown)
        super().__init__(f"unknown config keys: {', '.join(self.unknown)}")

    def __str__(self):
        return self.args[0]


def known_keys():
    """Every accepted dotted key, for documentation and error messages."""
    top = [f.name for f in dataclasses.fields(TrainConfig) if f.name not in SECTIONS]
    nested = [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in dataclasses.fields(cls)]
    return top + nested


def parse_value(text):
    """Interpret an override value with YAML scalar rules (ints, floats, lists, null)."""
    return yaml.safe_load(text)


def merge_overrides(tree, overrides):
    """Apply ``{"section.key": value}`` pairs to a nested dict, in place."""
    valid = set(known_keys())
    unknown = [k for k in overrides if k not in valid]
    if unknown:
        raise ConfigKeyError(unknown)
    for key, value in overrides.items():
        if "." in key:
            section, name = key.split(".", 1)
            tree.setdefault(section, {})[name] = value
        else:
            tree[key] = value
    return tree


def check_tree(tree):
    valid = set(known_keys())
    unknown = []
    for key, value in tree.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                unknown.append(f"{key} (expected a mapping)")
                continue
            unknown += [f"{key}.{k}" for k in value if f"{key}.{k}" not in valid]
        elif key not in valid:
            unknown.append(key)
    if unknown:
        raise ConfigKeyError(unknown)


def build_config(tree) -> TrainConfig:
    check_tree(tree)
    kwargs = {k: v for k, v in tree.items() if k not in SECTIONS}
    for section, cls in SECTIONS.items():
        kwargs[section] = cls(**tree.get(section, {}))
    return TrainConfig(**kwargs)


def load_config(path=None, overrides=None) -> TrainConfig:
    """Read ``path`` (or start from defaults), apply overrides, validate."""
    tree = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        tree = yaml.safe_load(path.read_text()) or {}
        if not isinstance(tree, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    merge_overrides(tree, overrides or {})
    return build_config(tree)


def dump_config(cfg: TrainConfig) -> str:
    tree = cfg.to_dict()
    for sec in SECTIONS:
        tree[sec] = {k: list(v) if isinstance(v, tuple) else v for k, v in tree[sec].items()}
    return yaml.safe_dump(tree, sort_keys=False)
