"""Plain ``key = value`` run configuration files.

Lines starting with ``#`` or ``;`` are comments.  Keys are TrainConfig
field names (dashes allowed in place of underscores).  Values are coerced
to the field's type; ``none`` clears an optional field.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

from ..errors import ContractError

_SECTION = "run"
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def coerce(value: str, annotation):
    """Turn ``value`` into ``annotation`` (int, float, bool, str or Optional)."""
    text = value.strip()
    args = typing.get_args(annotation)
    if type(None) in args:
        if text.lower() in ("none", "null", ""):
            return None
        annotation = next(a for a in args if a is not type(None))
    if annotation is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ContractError(f"not a boolean: {value!r}")
    if annotation in (int, float, str):
        try:
            return annotation(text)
        except ValueError as exc:
            raise ContractError(f"cannot read {value!r} as {annotation.__name__}") from exc
    raise ContractError(f"unsupported config type {annotation!r}")


def parse_config_text(text: str, cls) -> dict:
    """Validated ``{field: value}`` overrides for dataclass ``cls``."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ContractError(f"malformed config: {exc}") from exc
    types = _field_types(cls)
    out = {}
    for key, value in parser.items(_SECTION):
        name = key.strip().replace("-", "_")
        if name not in types:
            raise ContractError(f"unknown config key {key!r}")
        out[name] = coerce(value, types[name])
    return out


def load_config(path, cls) -> dict:
    return parse_config_text(Path(path).read_text(), cls)


def merge(cls, file_values: dict | None = None, overrides: dict | None = None):
    """Build ``cls`` from defaults, then the file, then explicit overrides
    (``None`` overrides are ignored so unset CLI flags fall through)."""
    values = dict(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return cls(**values)


def dump_config(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        lines.append(f"{f.name} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
