"""Layered run configuration.

Precedence, lowest to highest: built-in defaults, the RSFME_SEED
environment variable (seed only), a ``key = value`` config file, and
command-line flags. Every command prints the fully resolved mapping so a
run's inputs are always visible in its output.
"""
from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfigError

__all__ = ["parse_kv", "render_kv", "load_config_file", "resolve", "coerce_int",
           "coerce_float", "format_resolved"]


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and #-comments are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key in {raw!r}")
        out[key] = value.strip()
    return out


def render_kv(mapping: dict[str, object]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


def load_config_file(path: Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_kv(path.read_text())


def resolve(defaults: dict[str, object],
            file_values: dict[str, str] | None = None,
            flag_values: dict[str, object] | None = None,
            env: dict[str, str] | None = None) -> dict[str, object]:
    """Merge configuration layers; unknown file keys are errors."""
    env = os.environ if env is None else env
    merged = dict(defaults)
    if "seed" in merged and "RSFME_SEED" in env:
        merged["seed"] = coerce_int("RSFME_SEED", env["RSFME_SEED"])
    for source, values in (("config file", file_values), ("flags", flag_values)):
        if not values:
            continue
        for key, value in values.items():
            if key not in defaults:
                raise ConfigError(f"{source}: unknown setting {key!r}")
            if value is not None:
                merged[key] = value
    return merged


def coerce_int(name: str, value: object) -> int:
    try:
        return int(str(value), 10)
    except ValueError as e:
        raise ConfigError(f"{name} must be an integer, got {value!r}") from e


def coerce_float(name: str, value: object) -> float:
    try:
        return float(str(value))
    except ValueError as e:
        raise ConfigError(f"{name} must be a number, got {value!r}") from e


def format_resolved(mapping: dict[str, object]) -> str:
    lines = ["resolved configuration:"]
    lines += [f"  {k} = {mapping[k]}" for k in sorted(mapping)]
    return "\n".join(lines)
