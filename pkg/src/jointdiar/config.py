"""Plain ``section.key = value`` configuration files.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Keys without a dot belong to the ``global`` section. Values are parsed as
int, float, bool or string; a comma makes a tuple.
"""

from __future__ import annotations

import dataclasses


class ConfigError(ValueError):
    pass


def _parse_scalar(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(_parse_scalar(t.strip()) for t in text.split(",") if t.strip())
    return _parse_scalar(text)


def parse_config(text: str) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or any(c.isspace() for c in key):
            raise ConfigError(f"line {line_no}: invalid key {key!r}")
        section, _, name = key.rpartition(".")
        out.setdefault(section or "global", {})[name] = parse_value(value)
    return out


def load_config(path) -> dict[str, dict]:
    with open(path) as fh:
        return parse_config(fh.read())


def _coerce(value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        return value if isinstance(value, tuple) else (value,)
    return value


def build(cls, values: dict | None = None, **extra):
    """Instantiate dataclass ``cls`` with overrides, coerced to the types of
    its defaults. Unknown keys raise ``ConfigError``."""
    values = dict(values or {})
    values.update(extra)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"unknown {cls.__name__} option {key!r}")
        f = fields[key]
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = None
        kwargs[key] = _coerce(value, default) if default is not None else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def dump_dataclass(obj, section: str) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            continue
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{section}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
