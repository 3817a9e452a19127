"""
Scene geometry and the focused-beam illumination model.

Coordinates are in micrometres with z measured as depth below the diamond
surface (z > 0 inside the diamond, z < 0 in air).  The beam is a double cone
around the focus: the local radius is max(w, |dz| tan(half_angle)) and the
lateral profile is Gaussian, normalised so the on-axis power falls with the
cone cross-section.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .model import ModelParams
from .photophysics import IVCurve, NVCentre


def _vec3(v) -> tuple[float, float, float]:
    out = tuple(float(x) for x in v)
    if len(out) != 3 or not all(math.isfinite(x) for x in out):
        raise ValueError(f"expected a finite 3-vector, got {v!r}")
    return out


@dataclass(frozen=True)
class OpticsConfig:
    spot_radius: float = 0.3
    half_angle: float = 0.38
    refraction_factor: float = 2.5
    laser_power: float = 1.0
    aux_power: float = 0.0
    aux_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    smear: float = 0.0  # spot-radius growth per micrometre of focus depth

    def __post_init__(self):
        object.__setattr__(self, "aux_offset", _vec3(self.aux_offset))
        if not self.spot_radius > 0:
            raise ValueError("spot_radius must be positive")
        if not 0 < self.half_angle < math.pi / 2:
            raise ValueError("half_angle must lie in (0, pi/2)")
        if not self.refraction_factor > 1:
            raise ValueError("refraction_factor must exceed 1")
        if self.laser_power < 0 or self.aux_power < 0:
            raise ValueError("laser powers must be non-negative")
        if self.smear < 0:
            raise ValueError("smear must be non-negative")


@dataclass(frozen=True)
class Electrode:
    x: tuple[float, float]
    y: tuple[float, float]
    transparency: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "x", (float(self.x[0]), float(self.x[1])))
        object.__setattr__(self, "y", (float(self.y[0]), float(self.y[1])))
        if not (self.x[0] < self.x[1] and self.y[0] < self.y[1]):
            raise ValueError("electrode rectangle must have positive extent")
        if not 0 <= self.transparency <= 1:
            raise ValueError("transparency must lie in [0, 1]")


@dataclass(frozen=True)
class SourcePoint:
    position: tuple[float, float, float]
    iv: IVCurve = field(default_factory=IVCurve)
    electrode: int = 0
    polarity: int = 1

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))
        if self.polarity != 1:
            raise ValueError("Sources inject holes; polarity is fixed to +1")


@dataclass(frozen=True)
class BridgePatch:
    center: tuple[float, float, float]
    radius: float
    params: int = 0
    electrode: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center))
        if not self.radius > 0:
            raise ValueError("Bridge radius must be positive")
        if self.center[2] != 0.0:
            raise ValueError("Bridges sit on the surface (z = 0)")

    def sample_points(self) -> np.ndarray:
        """3x3 midpoint grid over the bounding square; all nine fall inside the disc."""
        off = np.array([-2.0, 0.0, 2.0]) * self.radius / 3.0
        dx, dy = np.meshgrid(off, off, indexing="ij")
        pts = np.zeros((9, 3))
        pts[:, 0] = self.center[0] + dx.ravel()
        pts[:, 1] = self.center[1] + dy.ravel()
        return pts


@dataclass(frozen=True)
class Scene:
    nvs: tuple[NVCentre, ...]
    sources: tuple[SourcePoint, ...]
    bridges: tuple[BridgePatch, ...]
    electrodes: tuple[Electrode, ...]
    optics: OpticsConfig = field(default_factory=OpticsConfig)
    params: tuple[ModelParams, ...] = (ModelParams(),)
    name: str = "scene"

    def __post_init__(self):
        for attr in ("nvs", "sources", "bridges", "electrodes", "params"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        if not self.params:
            raise ValueError("a scene needs at least one ModelParams entry")
        n_el = len(self.electrodes)
        for i, s in enumerate(self.sources):
            if not 0 <= s.electrode < n_el:
                raise ValueError(f"sources[{i}].electrode={s.electrode} is not a valid electrode index")
        seen = set()
        for i, b in enumerate(self.bridges):
            if not 0 <= b.electrode < n_el:
                raise ValueError(f"bridges[{i}].electrode={b.electrode} is not a valid electrode index")
            if not 0 <= b.params < len(self.params):
                raise ValueError(f"bridges[{i}].params={b.params} is not a valid params index")
            if b.electrode in seen:
                raise ValueError(f"bridges[{i}]: electrode {b.electrode} already has a Bridge")
            seen.add(b.electrode)

    def with_optics(self, **changes) -> "Scene":
        return replace(self, optics=replace(self.optics, **changes))

    def with_nv(self, index: int, **changes) -> "Scene":
        nvs = list(self.nvs)
        nvs[index] = replace(nvs[index], **changes)
        return replace(self, nvs=tuple(nvs))

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=repr).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Drives:
    """Per-element illumination for a batch of focus positions, shape (N, n)."""

    P_nv: np.ndarray
    P_s: np.ndarray
    P_b: np.ndarray


def focus_position(objective_z, lateral, optics: OpticsConfig) -> np.ndarray:
    """Focus point for an objective ``objective_z`` micrometres past the surface.

    Inside the diamond the focus moves ``refraction_factor`` times faster than
    the objective; above the surface it follows the objective one-to-one.
    """
    oz = np.asarray(objective_z, dtype=float)
    lat = np.asarray(lateral, dtype=float)
    depth = np.where(oz > 0, optics.refraction_factor * oz, oz)
    shape = np.broadcast_shapes(depth.shape, lat.shape[:-1])
    out = np.empty(shape + (3,))
    out[..., 0] = lat[..., 0]
    out[..., 1] = lat[..., 1]
    out[..., 2] = depth
    return out


def transmission(points, electrodes) -> np.ndarray:
    """Electrode attenuation for surface elements (z == 0) lying under an electrode."""
    pts = np.asarray(points, dtype=float)
    T = np.ones(pts.shape[:-1])
    at_surface = pts[..., 2] == 0.0
    for el in electrodes:
        inside = (
            at_surface
            & (pts[..., 0] >= el.x[0]) & (pts[..., 0] <= el.x[1])
            & (pts[..., 1] >= el.y[0]) & (pts[..., 1] <= el.y[1])
        )
        T = np.where(inside, T * el.transparency, T)
    return T


def illumination_at(point, focus, optics: OpticsConfig, electrodes=(), power: float | None = None):
    """Effective power (mW) delivered at ``point`` by a beam focused at ``focus``.

    Broadcasts over leading dimensions of both arguments.
    """
    p = np.asarray(point, dtype=float)
    f = np.asarray(focus, dtype=float)
    P = optics.laser_power if power is None else power
    w = optics.spot_radius + optics.smear * np.maximum(f[..., 2], 0.0)
    dz = np.abs(p[..., 2] - f[..., 2])
    r = np.maximum(w, dz * math.tan(optics.half_angle))
    rho2 = (p[..., 0] - f[..., 0]) ** 2 + (p[..., 1] - f[..., 1]) ** 2
    out = P * np.exp(-rho2 / r**2) * (w / r) ** 2
    if len(electrodes):
        out = out * transmission(p, electrodes)
    return out


def drive_from_focus(scene: Scene, focus, aux_on: bool = False) -> Drives:
    """Illumination of every NV, Source and Bridge for a batch of focus points.

    ``focus`` has shape (3,) or (N, 3).  Bridges average the beam over their
    nine sample points.  The auxiliary beam, focused at focus + aux_offset,
    adds to every element.
    """
    foc = np.atleast_2d(np.asarray(focus, dtype=float))
    optics = scene.optics
    beams = [(foc, optics.laser_power)]
    if aux_on and optics.aux_power > 0:
        beams.append((foc + np.asarray(optics.aux_offset), optics.aux_power))

    def over(points):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        total = np.zeros((foc.shape[0], pts.shape[0]))
        for fb, power in beams:
            total += illumination_at(pts[None, :, :], fb[:, None, :], optics, scene.electrodes, power)
        return total

    P_nv = over([nv.position for nv in scene.nvs]) if scene.nvs else np.zeros((foc.shape[0], 0))
    P_s = over([s.position for s in scene.sources]) if scene.sources else np.zeros((foc.shape[0], 0))
    if scene.bridges:
        pts = np.concatenate([b.sample_points() for b in scene.bridges])
        P_b = over(pts).reshape(foc.shape[0], len(scene.bridges), 9).mean(axis=2)
    else:
        P_b = np.zeros((foc.shape[0], 0))
    return Drives(P_nv=P_nv, P_s=P_s, P_b=P_b)
