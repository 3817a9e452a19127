"""
Scene and plan files.

Scenes are TOML documents: an ``[optics]`` table, arrays of tables for
``params``, ``nvs``, ``electrodes``, ``sources`` and ``bridges``, and an
optional ``[plan]`` table with default protocol settings.  Every key is
checked against the dataclass it populates, so a misspelt key is an error.
"""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .model import DomainError, ModelParams
from .optics import BridgePatch, Electrode, OpticsConfig, Scene, SourcePoint
from .photophysics import IVCurve, NVCentre
from .scan import Axis, ScanPlan

SCENE_DIR = Path(__file__).with_name("scenes")
TOP_KEYS = {"name", "optics", "params", "nvs", "electrodes", "sources", "bridges", "plan"}


class ConfigError(ValueError):
    """Malformed or invalid scene/plan file."""


def _inf(v):
    if isinstance(v, str) and v.lower() in ("inf", "infinity"):
        return math.inf
    return v


def _build(cls, table: Any, where: str, nested: dict | None = None):
    if not isinstance(table, dict):
        raise ConfigError(f"{where}: expected a table")
    names = {f.name for f in dataclasses.fields(cls)}
    aliases = {"axis": "name"} if cls is Axis else {}
    kwargs = {}
    for key, value in table.items():
        field = aliases.get(key, key)
        if field not in names:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if nested and field in nested:
            value = _build(nested[field], value, f"{where}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[field] = _inf(value)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError, DomainError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _array(doc: dict, key: str) -> list:
    value = doc.get(key, [])
    if not isinstance(value, list):
        raise ConfigError(f"{key}: expected an array of tables ([[{key}]])")
    return value


def parse_scene(doc: dict, name: str = "scene") -> tuple[Scene, ScanPlan | None]:
    unknown = set(doc) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key {sorted(unknown)[0]!r}")
    if not any(doc.get(k) for k in ("nvs", "sources", "bridges")):
        raise ConfigError("scene defines no NV, Source or Bridge")
    optics = _build(OpticsConfig, doc.get("optics", {}), "optics")
    params = [_build(ModelParams, t, f"params[{i}]") for i, t in enumerate(_array(doc, "params"))]
    nvs = [_build(NVCentre, t, f"nvs[{i}]") for i, t in enumerate(_array(doc, "nvs"))]
    electrodes = [_build(Electrode, t, f"electrodes[{i}]") for i, t in enumerate(_array(doc, "electrodes"))]
    sources = [_build(SourcePoint, t, f"sources[{i}]", {"iv": IVCurve})
               for i, t in enumerate(_array(doc, "sources"))]
    bridges = [_build(BridgePatch, t, f"bridges[{i}]") for i, t in enumerate(_array(doc, "bridges"))]
    try:
        scene = Scene(nvs=nvs, sources=sources, bridges=bridges, electrodes=electrodes, optics=optics,
                      params=params or (ModelParams(),), name=str(doc.get("name", name)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    plan = None
    if "plan" in doc:
        plan = _build(ScanPlan, doc["plan"], "plan", {"rows": Axis, "cols": Axis})
    return scene, plan


def load_config(path) -> tuple[Scene, ScanPlan | None]:
    """Scene plus its optional default plan.  Bare names resolve to shipped scenes."""
    p = resolve(path)
    try:
        doc = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return parse_scene(doc, p.stem)


def load_scene(path) -> Scene:
    return load_config(path)[0]


def resolve(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    shipped = SCENE_DIR / (p.name if p.suffix else p.name + ".scene")
    if shipped.exists():
        return shipped
    raise FileNotFoundError(f"no scene file {path!s}")


def shipped_scenes() -> list[str]:
    return sorted(p.stem for p in SCENE_DIR.glob("*.scene"))
