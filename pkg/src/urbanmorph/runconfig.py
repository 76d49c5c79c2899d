"""Plain-text key=value run configuration with CLI-flag overrides.

Format, one entry per line::

    # comment
    epochs = 200
    models = tft,lstm

Values are strings; commands cast them as needed.  Explicit CLI flags always
win over file values, which win over built-in defaults.
"""
from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Malformed config file (CLI exit code 2)."""


def load_config(path) -> dict:
    """Parse a key=value file into a string->string dict."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value.strip()
    return values


_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def _cast(raw: str, kind, key: str):
    if kind is bool:
        try:
            return _BOOL_WORDS[raw.lower()]
        except KeyError:
            raise ConfigError(f"config key {key}: {raw!r} is not a boolean")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: {raw!r} is not a {kind.__name__}")


def resolve(key: str, flag_value, config: dict, default, kind=str):
    """Precedence: explicit CLI flag > config-file value > default."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return _cast(config[key], kind, key)
    return default
