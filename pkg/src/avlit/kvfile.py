"""Plain-text ``key = value`` files with ``#`` comments, mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
from typing import Any, Dict, List, Tuple


class ConfigFileError(ValueError):
    def __init__(self, message: str, line: int = 0, source: str = "<config>"):
        where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(where + message)
        self.line = line


def parse(text: str, source: str = "<config>") -> List[Tuple[str, str, int]]:
    """Return ``(key, raw_value, line_number)`` triples in file order."""
    items = []
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigFileError("empty key", lineno, source)
        if key in seen:
            raise ConfigFileError(f"duplicate key {key!r} (first on line {seen[key]})", lineno, source)
        seen[key] = lineno
        items.append((key, value, lineno))
    return items


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def parse_value(raw: str, like: Any, key: str = "") -> Any:
    """Convert ``raw`` to the type of the example value ``like``."""
    if isinstance(like, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        if not raw:
            return ()
        elem = like[0] if like else 0
        return tuple(parse_value(p.strip(), elem, key) for p in raw.split(","))
    return raw


def dump(values: Dict[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def dataclass_to_dict(obj) -> Dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def dataclass_from_items(cls, items, source: str = "<config>", defaults=None):
    """Build ``cls`` from parsed items; unknown keys raise with their line number."""
    base = defaults if defaults is not None else cls()
    known = {f.name for f in dataclasses.fields(cls)}
    updates = {}
    for key, raw, lineno in items:
        if key not in known:
            raise ConfigFileError(f"unknown key {key!r}", lineno, source)
        try:
            updates[key] = parse_value(raw, getattr(base, key), key)
        except ValueError as exc:
            raise ConfigFileError(str(exc), lineno, source) from None
    return dataclasses.replace(base, **updates)
