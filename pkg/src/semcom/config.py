"""INI experiment configs: four sections mirroring the module configs.

Omitted keys take their defaults; unknown sections or keys are rejected.
``dump`` writes the canonical form (every key, fixed order), so
``parse(dump(cfg)) == cfg``.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Union

from .channel import ChannelConfig
from .data import DataConfig
from .model import ModelConfig
from .training import TrainConfig


class ExperimentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})


SECTIONS = ("model", "channel", "train", "data")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, Fraction):
        return f"{v.numerator}/{v.denominator}"
    if isinstance(v, float):
        return format_float(v)
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    return str(v)


def format_float(v: float) -> str:
    """Shortest round-tripping text; integral values keep no trailing '.0'."""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(default, Fraction):
            return Fraction(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in items)
        return raw
    except (ValueError, ZeroDivisionError) as exc:
        raise ExperimentConfigError(f"bad value for {key}: {raw!r}") from exc


def parse(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ExperimentConfigError(str(exc)) from exc
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ExperimentConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    base = ExperimentConfig()
    built = {}
    for sec in SECTIONS:
        default = getattr(base, sec)
        fields = {f.name: getattr(default, f.name) for f in dataclasses.fields(default)}
        changes = {}
        if cp.has_section(sec):
            for key, raw in cp.items(sec):
                if key not in fields:
                    raise ExperimentConfigError(f"unknown key [{sec}] {key}")
                changes[key] = _coerce(raw, fields[key], f"[{sec}] {key}")
        try:
            built[sec] = dataclasses.replace(default, **changes)
        except ValueError as exc:
            raise ExperimentConfigError(f"[{sec}] {exc}") from exc
    return ExperimentConfig(**built)


def load(path: Union[str, Path]) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ExperimentConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)


def dump(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        lines.append(f"[{sec}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
