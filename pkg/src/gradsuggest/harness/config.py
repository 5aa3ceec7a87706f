"""Experiment configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ..exceptions import ConfigError
from ..sampling import METHODS, STRATEGIES

SCENARIOS = ("scratch", "transfer")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str = "scratch"
    methods: tuple = METHODS
    strategy: str = "patient"
    budgets: tuple = (8, 12, 16, 20)
    epochs_initial: int = 30
    epochs_after: int = 30
    repeats: int = 10
    seed: int = 0
    alpha: float = 1e-4
    theta_max: float = 45.0
    latent_dim: int = 5
    vae_epochs: int = 50
    vae_lr: float = 1e-4
    seg_lr: float = 1e-3
    finetune_lr: float = 1e-4  # used instead of seg_lr when rounds start from a pretrained segmenter
    batch_size: int = 16
    pretrain_epochs: int = 30
    train_patients: int = 60
    test_patients: int = 20
    slices: int = 8
    size: int = 32
    data_seed: int = 0
    base_channels: int = 8
    depth: int = 2
    threshold: float = 0.5
    rounds: int = 1
    record_timing: bool = False

    @property
    def seeds(self) -> tuple:
        return tuple(range(self.seed, self.seed + self.repeats))

    def pool_units(self) -> int:
        return self.train_patients * (1 if self.strategy == "patient" else self.slices)

    def validate(self) -> "ExperimentConfig":
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise ConfigError(f"methods must be drawn from {METHODS}, got {self.methods!r}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must not repeat")
        if not self.budgets or len(set(self.budgets)) != len(self.budgets):
            raise ConfigError("budgets must be a non-empty list of distinct values")
        for b in self.budgets:
            if b <= 0 or b % 2:
                raise ConfigError(f"budget {b} must be a positive even number")
            if (b // 2) % self.rounds:
                raise ConfigError(f"half-budget {b // 2} is not divisible by rounds={self.rounds}")
            if b > self.pool_units():
                raise ConfigError(
                    f"budget {b} exceeds the pool of {self.pool_units()} {self.strategy} units"
                )
        for name in ("repeats", "train_patients", "test_patients", "slices", "size", "latent_dim",
                     "batch_size", "base_channels", "depth", "rounds", "vae_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs_initial", "epochs_after", "pretrain_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("vae_lr", "seg_lr", "finetune_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if not 0 < self.theta_max <= 180:
            raise ConfigError("theta_max must lie in (0, 180]")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.size % 8:
            raise ConfigError("size must be a multiple of 8")
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    return str(value)


_FIELD_TYPES = {f.name: type(f.default) for f in fields(ExperimentConfig)}
_TUPLE_ITEM = {"methods": str, "budgets": int}


def parse_value(key: str, raw: str):
    """Convert a raw string to the type of config field ``key``."""
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind is tuple:
            item = _TUPLE_ITEM[key]
            return tuple(item(part.strip()) for part in raw.split(",") if part.strip())
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, raw)
    return values


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (which win)."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_config_text(text))
    for key, value in overrides.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return ExperimentConfig(**values).validate()
