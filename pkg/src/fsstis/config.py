"""Flat run configuration with strict JSON loading.

Unknown keys are rejected (with the line they appear on) rather than ignored,
so a typo in a config file fails loudly instead of silently falling back to a
default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

VARIANTS = ("full", "no-ode", "no-fft", "no-rsp", "no-reg", "no-dsloss")


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration input."""


@dataclass
class Config:
    seed: int = 0
    image_size: int = 64
    channels: int = 32
    k_shot: int = 1
    n_intervals: int = 10
    interval_h: float = 0.01
    tau: float = 10.0
    alpha1: float = 0.5
    alpha2: float = 0.5
    lr_source: float = 0.001
    lr_finetune: float = 0.0005
    momentum: float = 0.9
    iterations_source: int = 2000
    iterations_finetune: int = 100
    eval_repeats: int = 20
    images_per_category: int = 40
    variant: str = "full"
    absolute_regularizer: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.image_size % 8 or self.image_size < 32:
            raise ConfigError("image_size must be >= 32 and divisible by 8")
        if self.k_shot < 1:
            raise ConfigError("k_shot must be >= 1")
        if self.n_intervals < 1:
            raise ConfigError("n_intervals must be >= 1")
        for name in ("interval_h", "tau", "lr_source", "lr_finetune"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError("alpha1/alpha2 must be nonnegative")
        for name in ("eval_repeats", "images_per_category", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.iterations_source < 0 or self.iterations_finetune < 0:
            raise ConfigError("iteration counts must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)


def _key_line(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return lineno
    return None


def config_from_dict(raw: dict, text: str = "") -> Config:
    known = {f.name for f in dataclasses.fields(Config)}
    for key in raw:
        if key not in known:
            line = _key_line(text, key)
            where = f" (line {line})" if line else ""
            raise ConfigError(f"unknown config key {key!r}{where}")
    try:
        return Config(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> Config:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root in {path} must be a JSON object")
    return config_from_dict(raw, text)
