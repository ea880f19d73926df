"""Flat ``key = value`` configuration files.

Syntax: UTF-8 text; blank lines and ``#`` comments ignored; ``[section]``
headers group keys; everything before the first header sits in the unnamed
section ``""``.  Values are raw strings (no quoting or escapes); callers
pull typed values through the getters.  No nesting — a bracket line inside
a section simply starts the next section.  Duplicate keys: last one wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ToolkitError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class Config:
    sections: dict[str, dict[str, str]] = field(default_factory=dict)

    def get(self, key: str, default=None, section: str = ""):
        return self.sections.get(section, {}).get(key, default)

    def require(self, key: str, section: str = "") -> str:
        value = self.get(key, section=section)
        if value is None:
            where = f"[{section}] " if section else ""
            raise ToolkitError(f"missing config key {where}{key}",
                               code="bad-config")
        return value

    def _typed(self, key, default, section, cast, kind):
        raw = self.get(key, section=section)
        if raw is None:
            return default
        try:
            return cast(raw)
        except ValueError:
            raise ToolkitError(
                f"config key {key} = {raw!r} is not {kind}",
                code="bad-config") from None

    def getint(self, key: str, default: int | None = None,
               section: str = "") -> int | None:
        return self._typed(key, default, section, int, "an integer")

    def getfloat(self, key: str, default: float | None = None,
                 section: str = "") -> float | None:
        return self._typed(key, default, section, float, "a number")

    def getbool(self, key: str, default: bool | None = None,
                section: str = "") -> bool | None:
        def cast(raw: str) -> bool:
            low = raw.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        return self._typed(key, default, section, cast, "a boolean")

    def items(self, section: str = "") -> dict[str, str]:
        return dict(self.sections.get(section, {}))


def parse_config_text(text: str, origin: str = "<string>") -> Config:
    sections: dict[str, dict[str, str]] = {}
    current = sections.setdefault("", {})
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ToolkitError(
                    f"{origin}:{lineno}: empty section name",
                    code="bad-config")
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ToolkitError(
                f"{origin}:{lineno}: expected 'key = value', got {line!r}",
                code="bad-config")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ToolkitError(
                f"{origin}:{lineno}: empty key", code="bad-config")
        current[key] = value.strip()
    return Config(sections)


def parse_config(path) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ToolkitError(f"cannot read config {path}: {exc}",
                           code="bad-config") from exc
    return parse_config_text(text, origin=str(path))
