"""Run configuration: flat key=value sections, strict parsing, exact echo.

The four sections (scene, train, degrade, eval) mirror the corresponding
dataclasses; every key has a default, unknown keys are rejected, and
``echo()`` emits a canonical rendering that re-parses to the identical
configuration.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass
from pathlib import Path

from .degrade import DegradeParams
from .errors import UsageError
from .evaluator import EvalConfig
from .synthdata import SceneConfig
from .trainer import TrainConfig

__all__ = ["RunConfig"]

_SECTION_TYPES = {
    "scene": SceneConfig,
    "train": TrainConfig,
    "degrade": DegradeParams,
    "eval": EvalConfig,
}


def _scalar_fields(cls) -> dict[str, type]:
    out = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, bool):
            out[f.name] = bool
        elif isinstance(default, int):
            out[f.name] = int
        elif isinstance(default, float):
            out[f.name] = float
        elif isinstance(default, str):
            out[f.name] = str
    return out


def _parse_value(section: str, key: str, text: str, typ: type):
    text = text.strip()
    if typ is bool:
        if text not in ("true", "false"):
            raise UsageError(f"[{section}] {key}: expected true or false, got {text!r}")
        return text == "true"
    try:
        return typ(text)
    except ValueError:
        raise UsageError(f"[{section}] {key}: expected {typ.__name__}, got {text!r}") from None


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig
    train: TrainConfig
    degrade: DegradeParams
    eval: EvalConfig

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(scene=SceneConfig(), train=TrainConfig(),
                   degrade=DegradeParams(), eval=EvalConfig())

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        return cls.default().merged_with_text(text, source=str(path))

    def merged_with_text(self, text: str, source: str = "<config>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=source)
        except configparser.Error as e:
            raise UsageError(f"cannot parse {source}: {e}") from e
        updates: dict[str, dict] = {}
        for section in parser.sections():
            if section not in _SECTION_TYPES:
                raise UsageError(f"unknown section [{section}] in {source}; "
                                 f"expected one of {sorted(_SECTION_TYPES)}")
            allowed = _scalar_fields(_SECTION_TYPES[section])
            for key, raw in parser.items(section):
                if key not in allowed:
                    raise UsageError(f"unknown key {key!r} in section [{section}] "
                                     f"of {source}")
                updates.setdefault(section, {})[key] = _parse_value(
                    section, key, raw, allowed[key])
        return self._apply(updates)

    def with_overrides(self, assignments) -> "RunConfig":
        """Apply ``section.key=value`` strings on top of this configuration."""
        updates: dict[str, dict] = {}
        for text in assignments:
            if "=" not in text or "." not in text.split("=", 1)[0]:
                raise UsageError(f"override {text!r} must look like section.key=value")
            dotted, raw = text.split("=", 1)
            section, key = dotted.split(".", 1)
            if section not in _SECTION_TYPES:
                raise UsageError(f"unknown section {section!r} in override {text!r}")
            allowed = _scalar_fields(_SECTION_TYPES[section])
            if key not in allowed:
                raise UsageError(f"unknown key {key!r} in override {text!r}")
            updates.setdefault(section, {})[key] = _parse_value(section, key, raw,
                                                                allowed[key])
        return self._apply(updates)

    def _apply(self, updates: dict[str, dict]) -> "RunConfig":
        parts = {}
        for section in _SECTION_TYPES:
            current = getattr(self, section)
            if section in updates:
                try:
                    current = dataclasses.replace(current, **updates[section])
                except ValueError as e:
                    raise UsageError(f"invalid [{section}] configuration: {e}") from e
            parts[section] = current
        return RunConfig(**parts)

    def echo(self) -> str:
        """Canonical rendering; ``merged_with_text(echo())`` is the identity."""
        buf = io.StringIO()
        for section, cls in _SECTION_TYPES.items():
            buf.write(f"[{section}]\n")
            obj = getattr(self, section)
            for key in sorted(_scalar_fields(cls)):
                buf.write(f"{key} = {_render_value(getattr(obj, key))}\n")
            buf.write("\n")
        return buf.getvalue()
