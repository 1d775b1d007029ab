"""Flat ``key = value`` config files mapped onto the package's config dataclasses."""
from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from pathlib import Path

from .errors import ConfigInvalid

_SECTION = "config"


def _convert(text: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if text.strip().lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(text, inner[0], key)
    if origin is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(t, args[0], key) for t in items)
        if len(items) == 1 and len(args) > 1:  # a scalar stands for a degenerate range
            items = items * len(args)
        if len(items) != len(args):
            raise ConfigInvalid(f"{key}: expected {len(args)} comma-separated values")
        return tuple(_convert(t, a, key) for t, a in zip(items, args))
    try:
        if hint is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigInvalid(f"{key}: cannot read {text.strip()!r} as {hint.__name__}") from None


def field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def parse_config(text: str, classes) -> list:
    """Split one config text across several dataclasses; unknown keys are an error."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ConfigInvalid(f"malformed config: {exc}") from None
    values = dict(parser[_SECTION])
    types = [field_types(c) for c in classes]
    unknown = set(values) - set().union(*types)
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = []
    for cls, hints in zip(classes, types):
        kwargs = {k: _convert(v, hints[k], k) for k, v in values.items() if k in hints}
        try:
            out.append(cls(**kwargs))
        except ConfigInvalid:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from None
    return out


def load_config(path, *classes):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc.strerror}") from None
    result = parse_config(text, classes)
    return result[0] if len(classes) == 1 else result


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def describe(cls, notes: dict[str, str] | None = None) -> str:
    """One ``key = default`` line per field, for help texts and template files."""
    notes = notes or {}
    lines = []
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        line = f"  {f.name} = {_format(default)}"
        if f.name in notes:
            line = f"{line:<34}# {notes[f.name]}"
        lines.append(line)
    return "\n".join(lines)


def dump_config(obj) -> str:
    return "".join(f"{f.name} = {_format(getattr(obj, f.name))}\n"
                   for f in dataclasses.fields(obj))
