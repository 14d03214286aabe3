"""Flat ``key = value`` run configuration and reproducibility manifests.

Resolution order is defaults, then a config file, then command-line flags.
A manifest is written in the same format, so it can be fed back through
``--config`` to repeat a run.
"""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_fraction(text) -> float:
    """Parse ``"17/255"``, ``"0.0667"`` or ``"1e4"`` to a float."""
    if isinstance(text, (int, float)):
        return float(text)
    try:
        return float(Fraction(str(text).strip()))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a number or fraction: {text!r}") from None


def normalise_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def read_config(path, allowed=None) -> dict[str, str]:
    out: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = normalise_key(key)
        if allowed is not None and key not in allowed:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value)


def write_manifest(path, resolved: dict) -> None:
    lines = ["# resolved run configuration; usable as --config"]
    lines += [f"{key} = {format_value(value)}" for key, value in resolved.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
