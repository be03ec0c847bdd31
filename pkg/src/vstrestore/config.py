"""Tiny ``key=value`` configuration format used by every command."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_lines(lines, source="<config>"):
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def read_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_lines(text.splitlines(), source=str(path))


def format_config(values):
    """Render a mapping as sorted ``key=value`` lines (stable, LF-terminated)."""
    return "".join(f"{k}={values[k]}\n" for k in sorted(values))


def write_config(path, values):
    Path(path).write_text(format_config(values))


def check_keys(values, allowed, source="config"):
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {source} key(s): {', '.join(unknown)}")


def as_float(values, key, default=None):
    if key not in values:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return float(default)
    try:
        return float(values[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: not a number: {values[key]!r}") from exc


def as_int(values, key, default=None):
    if key not in values:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return int(default)
    try:
        return int(str(values[key]))
    except ValueError as exc:
        raise ConfigError(f"{key}: not an integer: {values[key]!r}") from exc
