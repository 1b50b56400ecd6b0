"""Tiny ``key = value`` document format used for field, calibration and config files.

Lines starting with ``#`` are comments. A key may repeat; :func:`read_kv`
returns every value in file order, so repeated keys act as table rows.
"""
from __future__ import annotations

import dataclasses
import os
import types
import typing
from typing import Iterable


def parse_kv(text: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out.setdefault(key.strip(), []).append(value.strip())
    return out


def read_kv(path: str | os.PathLike) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read())


def format_kv(items: Iterable[tuple[str, object]], header: str | None = None) -> str:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    for key, value in items:
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def floats(value: str) -> list[float]:
    return [float(v) for v in value.replace(";", ",").split(",") if v.strip()]


def single(doc: dict[str, list[str]], key: str, default=None):
    vals = doc.get(key)
    if not vals:
        if default is None:
            raise KeyError(key)
        return default
    return vals[-1]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def dataclass_to_kv(obj, header: str | None = None) -> str:
    """Serialize a flat dataclass of scalars and float tuples."""
    return format_kv([(f.name, _fmt(getattr(obj, f.name))) for f in dataclasses.fields(obj)], header)


def coerce(tp, raw: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union or (hasattr(types, "UnionType") and origin is types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("", "none"):
            return None
        return coerce(args[0], raw)
    if origin is tuple:
        return tuple(floats(raw))
    if tp is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def dataclass_from_kv(cls, doc: dict[str, list[str]], overrides: dict | None = None):
    """Build ``cls`` from a parsed document; unknown keys raise, missing keys take defaults."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise KeyError(f"unknown keys: {', '.join(unknown)}")
    kw = {k: coerce(hints[k], single(doc, k)) for k in doc}
    kw.update(overrides or {})
    return cls(**kw)
