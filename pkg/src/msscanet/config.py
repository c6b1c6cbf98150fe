"""Plain ``key = value`` configuration files (``#`` starts a comment)."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .exceptions import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_kv(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def _convert(value: str, hint: str, key: str):
    hint = hint.replace(" ", "")
    try:
        if hint == "bool":
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if hint == "int":
            return int(value)
        if hint == "float":
            return float(value)
        if hint == "str":
            return value
        if hint.startswith("tuple[float"):
            return tuple(float(v) for v in value.split(",") if v.strip())
        if hint.startswith("tuple[str"):
            return tuple(v.strip() for v in value.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {hint}") from exc
    raise ConfigError(f"{key}: unsupported field type {hint}")


def coerce(cls, values: dict[str, str]) -> dict:
    """Convert string values to the field types of dataclass ``cls``; reject unknown keys."""
    hints = {f.name: f.type if isinstance(f.type, str) else typing.get_type_hints(cls)[f.name]
             for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(hints))
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {unknown}")
    return {k: _convert(v, str(hints[k]), k) for k, v in values.items()}


def split_known(values: dict[str, str], *classes) -> list[dict]:
    """Partition ``values`` among dataclasses by field name; leftovers are an error."""
    remaining = dict(values)
    parts = []
    for cls in classes:
        names = {f.name for f in dataclasses.fields(cls)}
        parts.append({k: remaining.pop(k) for k in list(remaining) if k in names})
    if remaining:
        raise ConfigError(f"unknown configuration keys: {sorted(remaining)}")
    return parts
