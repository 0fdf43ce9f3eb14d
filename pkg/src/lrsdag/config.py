"""Flat `key = value` experiment configuration files.

One assignment per line, `#` starts a comment, unknown keys are errors.
An empty file resolves to all defaults, and every run writes back the
fully resolved configuration, which re-parses to identical settings.
"""

import dataclasses

from . import data
from .engine import ExperimentConfig


class ConfigFileError(Exception):
    """Base class for configuration file failures."""


class ParseError(ConfigFileError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class UnknownKey(ConfigFileError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


_DEFAULTS = ExperimentConfig()

FIELD_NAMES = tuple(f.name for f in dataclasses.fields(ExperimentConfig))


def _convert(key, text, lineno):
    kind = type(getattr(_DEFAULTS, key))
    if kind is str:
        return text
    try:
        return kind(text)
    except ValueError:
        raise ParseError(
            f"line {lineno}: cannot parse {key} = {text!r} as {kind.__name__}",
            lineno) from None


def parse_text(text):
    """Parse configuration text into an ExperimentConfig."""
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(
                f"line {lineno}: expected 'key = value', got {raw.strip()!r}",
                lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in FIELD_NAMES:
            raise UnknownKey(f"line {lineno}: unknown key {key!r}", lineno)
        if key in seen:
            raise ParseError(f"line {lineno}: duplicate key {key!r}", lineno)
        seen[key] = _convert(key, value, lineno)
    return ExperimentConfig(**seen)


def load(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_text(fh.read())


def _format(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render(cfg):
    """Render every field, defaults included, in declaration order."""
    lines = ["# resolved experiment configuration"]
    for field in dataclasses.fields(ExperimentConfig):
        lines.append(f"{field.name} = {_format(getattr(cfg, field.name))}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg, path):
    data.atomic_write_text(path, render(cfg))
