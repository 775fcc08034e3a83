"""INI-style run configuration.

Sections map onto the config dataclasses::

    [model]   ModelConfig    (network widths; tuples written as "32, 32")
    [train]   TrainConfig
    [flow]    FlowConfig     (num_steps and/or step_size)
    [synth]   SynthConfig
    [domain]  column, low, high   (source-domain rule)

Missing keys keep their defaults; unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import SOURCE_RANGE, SynthConfig
from .flow import FlowConfig
from .training import ModelConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DomainRule:
    column: str = "air_flow_setpoint"
    low: float = SOURCE_RANGE[0]
    high: float = SOURCE_RANGE[1]

    def __post_init__(self):
        if self.low > self.high:
            raise ValueError("domain rule needs low <= high")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    domain: DomainRule = field(default_factory=DomainRule)


SECTIONS = {f.name: f for f in fields(RunConfig)}


def _convert(raw: str, default: Any, where: str):
    try:
        if isinstance(default, bool):
            return {"true": True, "false": False, "1": True, "0": False}[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(part) for part in raw.replace(",", " ").split())
        return raw.strip()
    except (ValueError, KeyError):
        raise ConfigError(f"{where}: cannot read {raw!r} as {type(default).__name__}") from None


def _section(name: str, items: dict[str, str], base):
    known = {f.name for f in fields(base)}
    unknown = sorted(set(items) - known)
    if unknown:
        raise ConfigError(f"[{name}]: unknown key(s) {', '.join(unknown)}")
    values = {k: _convert(v, getattr(base, k), f"[{name}] {k}") for k, v in items.items()}
    if name == "flow" and "num_steps" in values and "step_size" not in values:
        values["step_size"] = 1.0 / values["num_steps"]
    try:
        return replace(base, **values)
    except ValueError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = base or RunConfig()
    unknown = sorted(set(parser.sections()) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    updates = {name: _section(name, dict(parser[name]), getattr(cfg, name)) for name in parser.sections()}
    return replace(cfg, **updates)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base)


def dump_config(cfg: RunConfig) -> str:
    """Every field of every section, in a form ``parse_config`` reads back."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        lines.append("")
    return "\n".join(lines)
