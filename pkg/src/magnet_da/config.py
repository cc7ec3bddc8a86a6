"""Flat ``key = value`` run configuration files.

Keys are field names of TrainConfig or NetworkConfig. Blank lines and text
after ``#`` are ignored. Values are parsed according to the field's type.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .losses import KernelError, KernelSpec
from .network import NetworkConfig
from .train import TrainConfig


class ConfigFileError(ValueError):
    """Malformed config text or unknown key."""


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


TRAIN_FIELDS = _fields(TrainConfig)
NETWORK_FIELDS = _fields(NetworkConfig)


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def convert(key: str, raw: str):
    """Parse ``raw`` as the type of field ``key``."""
    f = TRAIN_FIELDS.get(key) or NETWORK_FIELDS.get(key)
    if f is None:
        raise ConfigFileError(f"unknown config key {key!r}")
    default = _default(f)
    raw = raw.strip()
    try:
        if isinstance(default, KernelSpec):
            return KernelSpec.parse(raw)
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw, 0)
        if isinstance(default, float):
            return float(raw)
        return raw
    except (ValueError, KernelError) as exc:
        raise ConfigFileError(f"bad value for {key}: {raw!r}") from exc


def parse_config(text: str) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigFileError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        out[key] = convert(key, value)
    return out


def load_config(path) -> dict[str, object]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def split_values(values: dict[str, object]) -> tuple[dict, dict]:
    """Partition parsed values into (train, network) keyword dicts."""
    train = {k: v for k, v in values.items() if k in TRAIN_FIELDS}
    net = {k: v for k, v in values.items() if k in NETWORK_FIELDS}
    return train, net


def build_configs(values: dict[str, object], train_base=None, net_base=None) -> tuple[TrainConfig, NetworkConfig]:
    train, net = split_values(values)
    train_base = train_base or TrainConfig()
    net_base = net_base or NetworkConfig()
    try:
        tc = dataclasses.replace(train_base, **train)
        nc = dataclasses.replace(net_base, **net)
        nc.validate()
    except ValueError as exc:
        raise ConfigFileError(str(exc)) from exc
    return tc, nc


def render_config(train: TrainConfig, net: NetworkConfig) -> str:
    """Inverse of ``parse_config`` for a full pair of configs."""
    lines = ["# training"]
    for name in TRAIN_FIELDS:
        value = getattr(train, name)
        lines.append(f"{name} = {value.describe() if isinstance(value, KernelSpec) else value}")
    lines.append("# network")
    for name in NETWORK_FIELDS:
        lines.append(f"{name} = {getattr(net, name)}")
    return "\n".join(lines) + "\n"
