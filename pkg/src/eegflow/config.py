"""Run configuration: an INI file with one section per config object.

    [synth]         SynthConfig fields
    [architecture]  n_stages (or "auto"), kernel_size, hidden_factor, seed
    [train]         scalar TrainConfig fields
    [ot]            OTConfig fields
    [run]           objective (ml | ot), output_dir, valid_fraction, split_seed

Values are Python-style literals; ``none``/``auto`` mean "unset". Unknown
sections and keys are errors. Command-line ``--set section.key=value``
overrides are applied on top of the file.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .layers import ArchitectureConfig
from .signals import SynthConfig
from .training import TrainConfig
from .transport import OTConfig

OUTPUT_DIR_ENV = "EEGFLOW_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "eegflow_out"

OBJECTIVES = {"ml": "max_likelihood", "ot": "optimal_transport"}


class ConfigError(ValueError):
    pass


@dataclass
class ArchitectureSettings:
    """ArchitectureConfig minus the fields that come from the dataset."""

    n_stages: int | None = None
    kernel_size: int = 7
    hidden_factor: int = 2
    seed: int = 0

    def build(self, n_channels: int, n_times: int, n_classes: int) -> ArchitectureConfig:
        return ArchitectureConfig(n_channels, n_times, n_classes, self.n_stages,
                                  self.kernel_size, self.hidden_factor, self.seed)


@dataclass
class TrainSettings:
    learning_rate: float = 1e-3
    prior_learning_rate: float | None = 5e-2
    batch_size: int = 32
    epochs: int = 50
    dequant_amplitude: float | None = None
    seed: int = 0
    ot_steps_per_epoch: int = 1
    checkpoint_every: int = 10


@dataclass
class RunSettings:
    objective: str = "ml"
    output_dir: str | None = None
    valid_fraction: float = 0.8
    split_seed: int = 0

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR)


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    architecture: ArchitectureSettings = field(default_factory=ArchitectureSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    ot: OTConfig = field(default_factory=OTConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self.train), objective=OBJECTIVES[self.run.objective],
                           ot=self.ot)

    def validate(self) -> None:
        if self.run.objective not in OBJECTIVES:
            raise ConfigError(f"run.objective must be one of {sorted(OBJECTIVES)}, got {self.run.objective!r}")
        if not 0 < self.run.valid_fraction <= 1:
            raise ConfigError(f"run.valid_fraction must lie in (0, 1], got {self.run.valid_fraction}")
        if self.ot.solver not in ("exact", "sinkhorn"):
            raise ConfigError(f"ot.solver must be exact or sinkhorn, got {self.ot.solver!r}")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


SECTIONS = [f.name for f in dataclasses.fields(RunConfig)]


def _parse_value(raw: str, hint, where: str):
    raw = raw.strip()
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional and raw.lower() in ("none", "auto", ""):
        return None
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    try:
        if base is bool:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if base is int:
            return int(raw)
        if base is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {base.__name__}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_value(config: RunConfig, dotted: str, raw: str) -> None:
    section, _, key = dotted.strip().partition(".")
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}; known: {', '.join(SECTIONS)}")
    obj = getattr(config, section)
    hints = typing.get_type_hints(type(obj))
    if key not in hints:
        raise ConfigError(f"unknown key {key!r} in section [{section}]; known: {', '.join(hints)}")
    setattr(obj, key, _parse_value(raw, hints[key], f"{section}.{key}"))


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    config = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            set_value(config, f"{section}.{key}", raw)
    return config


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """File (if any) then ``key=value`` overrides, validated."""
    if path is None:
        config = RunConfig()
    else:
        try:
            config = parse_config(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for item in overrides or []:
        dotted, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        set_value(config, dotted, raw)
    config.validate()
    return config


def format_config(config: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
