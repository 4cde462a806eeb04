"""Flat ``key=value`` (de)serialisation of config dataclasses.

Config files are INI-style with the sections ``task``, ``model``, ``train``,
``decode`` and ``lm``; every value is a scalar, a comma-separated list, or a
``site:value`` map written as ``attn:0.1,ffn:0.1``.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

SECTIONS = ("task", "model", "train", "decode", "lm")


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, dict):
        return ",".join(f"{k}:{_format(v)}" for k, v in value.items())
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def _parse_scalar(kind, text: str):
    if kind is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text.strip())


def _parse(tp, text: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:  # Optional[X]
        inner = [a for a in args if a is not type(None)][0]
        return None if text.strip() in ("", "none", "None") else _parse(inner, text)
    if origin in (tuple, list):
        items = [t for t in text.split(",") if t.strip()]
        vals = [_parse_scalar(args[0], t) for t in items]
        return tuple(vals) if origin is tuple else vals
    if origin is dict:
        out = {}
        for item in text.split(","):
            if not item.strip():
                continue
            k, _, v = item.partition(":")
            out[k.strip()] = _parse_scalar(args[1], v)
        return out
    return _parse_scalar(tp, text)


def to_text(obj) -> str:
    """``key=value`` lines for every field of a dataclass instance."""
    return "".join(f"{f.name}={_format(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))


def from_mapping(cls, mapping: dict, section: str = ""):
    """Build ``cls`` from string values; unknown keys and bad values raise ConfigError."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    where = f"[{section}] " if section else ""
    for key, text in mapping.items():
        if key not in names:
            raise ConfigError(f"{where}unknown field {key!r}")
        try:
            kwargs[key] = _parse(hints[key], text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}{key}: cannot parse {text!r} ({exc})") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}{exc}") from None


def from_text(cls, text: str):
    mapping = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            mapping[key.strip()] = value
    return from_mapping(cls, mapping)


def read_sections(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(Path(path).read_text())
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]; expected one of {', '.join(SECTIONS)}")
    return {name: dict(parser[name]) for name in SECTIONS if parser.has_section(name)}


def write_sections(path, sections: dict) -> None:
    lines = []
    for name, obj in sections.items():
        lines.append(f"[{name}]")
        lines.extend(to_text(obj).splitlines())
        lines.append("")
    Path(path).write_text("\n".join(lines))
