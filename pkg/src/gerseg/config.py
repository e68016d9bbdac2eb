"""Flat run configuration: one `key = value` text file covering network,
training, data generation and paths, with CLI-flag overrides (flag wins).

This module deliberately avoids numpy so the command line can configure
thread pools before numerical libraries load.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    # network
    base_width: int = 8
    stages: int = 4
    blocks_per_stage: int = 2
    skip_mode: str = "add"
    downsample: str = "conv_then_avgpool"
    upsample_mode: str = "nearest"
    group_mode: str = "group"
    n_classes: int = 2
    width_scale: float = 0.3535533905932738  # 1/sqrt(8): parameter-matches the regular twin
    in_channels: int = 1
    # training
    batch_size: int = 4
    lr0: float = 2e-4
    max_epochs: int = 100
    early_stop_patience: int = 25
    lr_decay: float = 0.5
    lr_patience: int = 10
    seed: int = 0
    augment: str = "on"
    # synthetic data
    n_images: int = 250
    image_size: int = 64
    blobs_min: int = 1
    blobs_max: int = 3
    radius_min: float = 5.0
    radius_max: float = 14.0
    fg_mean: float = 0.75
    bg_mean: float = 0.35
    noise_sigma: float = 0.10
    data_seed: int = 7
    train_frac: float = 0.8
    # paths / execution
    corpus_dir: str = "corpus"
    out_dir: str = "runs/out"
    threads: int = 1

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from e


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _convert(key, val)
    return values


def load_config(path: str | None, overrides: dict) -> RunConfig:
    """Defaults <- config file <- explicit CLI overrides."""
    values = {}
    if path is not None:
        with open(path) as f:
            values.update(parse_config_text(f.read()))
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _convert(key, str(val))
    return RunConfig(**values)
