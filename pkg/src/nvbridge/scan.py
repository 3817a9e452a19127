"""
Virtual confocal measurement protocols.

All times are simulated seconds.  Blanking the laser freezes every Bridge
(no capture, no release, no current), so moves between positions are
instantaneous and need no integration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import ode
from .model import ContrastPair, InvariantError, contrast_pair
from .network import Network, Terms
from .optics import Drives, Scene, drive_from_focus, focus_position

KINDS = ("standard", "reset", "depth_reset", "discharge", "power_sweep", "contrast_sweep")
ORDERS = ("row", "column", "random")


@dataclass(frozen=True)
class Axis:
    """Scan axis; ``name`` is x, y or z (objective descent past the surface)."""

    name: str
    start: float
    stop: float
    pitch: float

    def __post_init__(self):
        if self.name not in ("x", "y", "z"):
            raise ValueError(f"axis name must be x, y or z, got {self.name!r}")
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        if self.stop < self.start:
            raise ValueError("axis stop must not precede start")

    @property
    def values(self) -> np.ndarray:
        n = int(math.floor((self.stop - self.start) / self.pitch + 1e-9)) + 1
        return self.start + self.pitch * np.arange(n)


@dataclass(frozen=True)
class ScanPlan:
    kind: str = "reset"
    rows: Axis = Axis("y", -2.0, 2.0, 0.2)
    cols: Axis = Axis("x", -2.0, 2.0, 0.2)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)  # x, y, objective z
    nv_home: int = 0
    settle_time: float = 1.0
    reset_threshold: float = 0.95
    bias: float = 1.0
    aux: bool = False
    main_powers: tuple[float, ...] = ()
    aux_powers: tuple[float, ...] = ()
    probe: tuple[float, float, float] | None = None  # fixed focus point for decay runs
    tau_cap: float = 300.0
    noise_sigma: float = 0.0
    seed: int = 0
    order: str = "row"
    restore: str = "ideal"
    bridge: int = 0
    q_scale: float = 1.0
    rtol: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "main_powers", tuple(float(v) for v in self.main_powers))
        object.__setattr__(self, "aux_powers", tuple(float(v) for v in self.aux_powers))
        if self.probe is not None:
            object.__setattr__(self, "probe", tuple(float(v) for v in self.probe))
            if len(self.probe) != 3:
                raise ValueError("probe must be a 3-vector")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not self.settle_time > 0:
            raise ValueError("settle_time must be positive")
        if not 0 < self.reset_threshold <= 1:
            raise ValueError("reset_threshold must lie in (0, 1]")
        if not self.tau_cap > 0:
            raise ValueError("tau_cap must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")
        if self.restore not in ("ideal", "carry"):
            raise ValueError("restore must be 'ideal' or 'carry'")
        if self.rows.name == self.cols.name:
            raise ValueError("rows and cols must scan different coordinates")


@dataclass
class ScanResult:
    reset_map: np.ndarray
    reaction_map: np.ndarray
    per_pixel_tau: np.ndarray
    timed_out: np.ndarray
    row_values: np.ndarray
    col_values: np.ndarray
    metadata: dict = field(default_factory=dict)
    final_B: np.ndarray | None = None


@dataclass
class ChargeRecord:
    illumination_time: float
    integrated_charge: float
    spike_t: np.ndarray
    spike_I: np.ndarray
    B_start: float
    B_end: float
    J_nv: float  # NV-spot current at the end of NV illumination
    q_scale: float = 1.0

    def conservation_error(self) -> float:
        """Relative gap between the integrated charge and q_scale * (B_start - B_end)."""
        expected = self.q_scale * (self.B_start - self.B_end)
        return abs(self.integrated_charge - expected) / max(abs(expected), 1e-300)


@dataclass
class DecayRecord:
    t: np.ndarray
    J: np.ndarray
    t_one_percent: float  # NaN if J never fell below 1 % of its initial value


# ---------------------------------------------------------------- helpers

def home_focus(scene: Scene, plan: ScanPlan) -> np.ndarray:
    if not scene.nvs:
        raise ValueError("the scene has no NV centre to return to")
    if not 0 <= plan.nv_home < len(scene.nvs):
        raise ValueError(f"nv_home={plan.nv_home} is not a valid NV index")
    return np.asarray(scene.nvs[plan.nv_home].position, dtype=float)


def pixel_foci(plan: ScanPlan, optics) -> np.ndarray:
    """Focus points of the scan grid, shape (rows, cols, 3)."""
    rv, cv = plan.rows.values, plan.cols.values
    coords = {"x": plan.origin[0], "y": plan.origin[1], "z": plan.origin[2]}
    R, C = np.meshgrid(rv, cv, indexing="ij")
    grids = {k: np.full(R.shape, v) for k, v in coords.items()}
    grids[plan.rows.name] = R
    grids[plan.cols.name] = C
    lateral = np.stack([grids["x"], grids["y"]], axis=-1)
    return focus_position(grids["z"], lateral, optics)


def visit_order(plan: ScanPlan, shape: tuple[int, int]) -> np.ndarray:
    n = shape[0] * shape[1]
    if plan.order == "row":
        return np.arange(n)
    if plan.order == "column":
        return np.arange(n).reshape(shape).T.ravel()
    return np.random.default_rng(plan.seed).permutation(n)


def _tile(t: Terms, n: int) -> Terms:
    rows = np.zeros(n, dtype=int)
    return t.take(rows)


def _evolve(net: Network, terms: Terms, B0: np.ndarray, duration, rtol: float, event=None, trace=False):
    """Integrate the Bridge populations of a batch under constant per-row drives."""
    B0 = np.asarray(B0, dtype=float)
    if net.K == 0:
        n = B0.shape[0]
        return ode.Integration(y=B0.copy(), t=np.broadcast_to(duration, (n,)).astype(float),
                               t_event=np.full(n, np.nan))
    tol = rtol * net.B_max

    def rhs(y, rows):
        return net.rhs(y, terms.take(rows))

    def inside(y, rows):
        return np.all(np.maximum(-y, y - net.B_max) <= tol, axis=1)

    def clamp(y, rows):
        over = np.maximum(-y, y - net.B_max)
        if np.any(over > tol):
            raise InvariantError(f"Bridge population left [0, B_max] by {float(np.max(over)):.3e}")
        return np.clip(y, 0.0, net.B_max)

    return ode.integrate(rhs, B0, duration, rtol=rtol, atol=tol, project=clamp, admissible=inside,
                         event=event, trace=trace)


def _noise(plan: ScanPlan, shape, count: int) -> list[np.ndarray]:
    """Per-pixel Gaussian noise maps, drawn in grid order (independent of visit order)."""
    rng = np.random.default_rng(plan.seed)
    maps = [rng.normal(0.0, 1.0, shape) for _ in range(count)]
    return [plan.noise_sigma * m for m in maps]


def reference_state(scene: Scene, plan: ScanPlan, net: Network | None = None):
    """Fully settled NV-spot state: (J_ref, B_ref, terms at home)."""
    net = net or Network(scene, plan.bias)
    t_home = net.terms(drive_from_focus(scene, home_focus(scene, plan), plan.aux))
    J, B = net.steady(t_home)
    return float(J[0]), B[0], t_home


# ---------------------------------------------------------------- scans

def run_standard_scan(scene: Scene, plan: ScanPlan, initial_B=None) -> ScanResult:
    """Sequential scan carrying the Bridge state from pixel to pixel."""
    net = Network(scene, plan.bias)
    foci = pixel_foci(plan, scene.optics)
    shape = foci.shape[:2]
    flat = foci.reshape(-1, 3)
    terms = net.terms(drive_from_focus(scene, flat, plan.aux))
    B = np.zeros((1, net.K)) if initial_B is None else np.array(initial_B, dtype=float).reshape(1, net.K)
    J = np.zeros(flat.shape[0])
    for p in visit_order(plan, shape):
        tp = terms.take(np.array([p]))
        B = _evolve(net, tp, B, plan.settle_time, plan.rtol).y
        J[p] = net.current(B, tp)[0]
    (noise,) = _noise(plan, shape, 1)
    reset = J.reshape(shape) + noise
    return ScanResult(
        reset_map=reset,
        reaction_map=np.full(shape, np.nan),
        per_pixel_tau=np.zeros(shape),
        timed_out=np.zeros(shape, dtype=bool),
        row_values=plan.rows.values,
        col_values=plan.cols.values,
        metadata=_metadata(scene, plan),
        final_B=B[0].copy(),
    )


def _threshold_event(net: Network, terms: Terms, target: np.ndarray):
    """Event firing when |J| first reaches ``target`` (per row), interpolated linearly."""

    def event(y_old, y_new, rows, dt):
        t = terms.take(rows)
        j0 = np.abs(net.current(y_old, t))
        j1 = np.abs(net.current(y_new, t))
        thr = target[rows]
        hit = j1 >= thr
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(j1 > j0, (thr - j0) / (j1 - j0), 1.0)
        return np.where(hit, np.clip(frac, 0.0, 1.0), np.nan)

    return event


def _reset_batch(net: Network, plan: ScanPlan, t_pix: Terms, t_home: Terms, B_start: np.ndarray, J_ref: float):
    """One reset-protocol cycle for every row: returns reset, reaction, tau, timed_out, B_after."""
    n = B_start.shape[0]
    after_pixel = _evolve(net, t_pix, B_start, plan.settle_time, plan.rtol).y
    reset = net.current(after_pixel, t_pix)
    home = _tile(t_home, n)
    after_home = _evolve(net, home, after_pixel, plan.settle_time, plan.rtol).y
    reaction = net.current(after_home, home)
    target = np.full(n, plan.reset_threshold * abs(J_ref))
    tau = np.zeros(n)
    timed_out = np.zeros(n, dtype=bool)
    B_after = after_home.copy()
    pending = np.flatnonzero(np.abs(reaction) < target)
    if pending.size:
        sub = home.take(pending)
        res = _evolve(net, sub, after_home[pending], plan.tau_cap, plan.rtol,
                      event=_threshold_event(net, sub, target[pending]))
        hit = np.isfinite(res.t_event)
        tau[pending] = np.where(hit, res.t_event, plan.tau_cap)
        timed_out[pending] = ~hit
        B_after[pending] = res.y
    return reset, reaction, tau, timed_out, B_after


def run_reset_scan(scene: Scene, plan: ScanPlan) -> ScanResult:
    """Reset PC scan and PC reaction scan.

    Every pixel starts from the settled NV-spot state.  With ``restore =
    'ideal'`` the NV illumination after the threshold is assumed to continue
    until that state is reached again, which makes pixels independent and
    lets them run as one batch; ``'carry'`` keeps the state reached at the
    threshold and visits pixels one by one.
    """
    net = Network(scene, plan.bias)
    J_ref, B_ref, t_home = reference_state(scene, plan, net)
    foci = pixel_foci(plan, scene.optics)
    shape = foci.shape[:2]
    flat = foci.reshape(-1, 3)
    order = visit_order(plan, shape)
    n = flat.shape[0]
    reset = np.empty(n)
    reaction = np.empty(n)
    tau = np.empty(n)
    timed_out = np.empty(n, dtype=bool)
    if plan.restore == "ideal":
        t_pix = net.terms(drive_from_focus(scene, flat[order], plan.aux))
        r, q, tt, to, _ = _reset_batch(net, plan, t_pix, t_home, np.tile(B_ref, (n, 1)), J_ref)
        reset[order], reaction[order], tau[order], timed_out[order] = r, q, tt, to
    else:
        t_all = net.terms(drive_from_focus(scene, flat, plan.aux))
        B = B_ref[None, :].copy()
        for p in order:
            r, q, tt, to, B = _reset_batch(net, plan, t_all.take(np.array([p])), t_home, B, J_ref)
            reset[p], reaction[p], tau[p], timed_out[p] = r[0], q[0], tt[0], to[0]
    n_reset, n_reaction = _noise(plan, shape, 2)
    meta = _metadata(scene, plan)
    meta["J_ref"] = J_ref
    return ScanResult(
        reset_map=reset.reshape(shape) + n_reset,
        reaction_map=reaction.reshape(shape) + n_reaction,
        per_pixel_tau=tau.reshape(shape),
        timed_out=timed_out.reshape(shape),
        row_values=plan.rows.values,
        col_values=plan.cols.values,
        metadata=meta,
    )


def run_depth_scan(scene: Scene, plan: ScanPlan) -> ScanResult:
    """Reset protocol on a vertical plane; one axis is the objective descent ``z``."""
    if "z" not in (plan.rows.name, plan.cols.name):
        raise ValueError("a depth scan needs one axis named 'z' (objective position)")
    if scene.nvs:
        res = run_reset_scan(scene, plan)
    else:
        res = _source_only_map(scene, plan)
    z_axis = plan.rows if plan.rows.name == "z" else plan.cols
    res.metadata["focus_depth"] = focus_position(z_axis.values, np.zeros((z_axis.values.size, 2)),
                                                 scene.optics)[:, 2].tolist()
    res.metadata["depth_axis"] = "rows" if plan.rows.name == "z" else "cols"
    return res


def _source_only_map(scene: Scene, plan: ScanPlan) -> ScanResult:
    """Without an NV nothing charges a Bridge: every pixel sees its steady current."""
    net = Network(scene, plan.bias)
    foci = pixel_foci(plan, scene.optics)
    shape = foci.shape[:2]
    t_pix = net.terms(drive_from_focus(scene, foci.reshape(-1, 3), plan.aux))
    B0 = np.zeros((t_pix.G.size, net.K))
    after = _evolve(net, t_pix, B0, plan.settle_time, plan.rtol).y
    J = net.current(after, t_pix).reshape(shape)
    n_reset, n_reaction = _noise(plan, shape, 2)
    meta = _metadata(scene, plan)
    meta["J_ref"] = 0.0
    return ScanResult(J + n_reset, np.zeros(shape) + n_reaction, np.zeros(shape),
                      np.zeros(shape, dtype=bool), plan.rows.values, plan.cols.values, meta)


def _metadata(scene: Scene, plan: ScanPlan) -> dict:
    return {
        "kind": plan.kind,
        "scene": scene.name,
        "scene_hash": scene.digest(),
        "rows": {"axis": plan.rows.name, "start": plan.rows.start, "pitch": plan.rows.pitch},
        "cols": {"axis": plan.cols.name, "start": plan.cols.start, "pitch": plan.cols.pitch},
        "settle_time": plan.settle_time,
        "reset_threshold": plan.reset_threshold,
        "bias": plan.bias,
        "seed": plan.seed,
        "order": plan.order,
        "restore": plan.restore,
    }


# ---------------------------------------------------------------- discharge

def run_discharge(scene: Scene, plan: ScanPlan, nv_illumination_time: float, initial_B=None) -> ChargeRecord:
    """Charge the Bridges at the NV, then release the target Bridge with the laser on it.

    The spike current is q_scale * P_B^b * B of the target Bridge; integration
    stops once its population drops below 1e-3 B_max (or after tau_cap).
    """
    if nv_illumination_time < 0:
        raise ValueError("illumination time must be non-negative")
    if not 0 <= plan.bridge < len(scene.bridges):
        raise ValueError(f"bridge={plan.bridge} is not a valid Bridge index")
    net = Network(scene, plan.bias)
    k = plan.bridge
    t_home = net.terms(drive_from_focus(scene, home_focus(scene, plan), plan.aux))
    B0 = np.zeros((1, net.K)) if initial_B is None else np.array(initial_B, dtype=float).reshape(1, net.K)
    B1 = _evolve(net, t_home, B0, nv_illumination_time, plan.rtol).y if nv_illumination_time > 0 else B0
    J_nv = float(net.current(B1, t_home)[0])
    B_start = float(B1[0, k])
    floor = 1e-3 * net.B_max[k]
    if B_start < floor:
        return ChargeRecord(nv_illumination_time, 0.0, np.zeros(1), np.zeros(1), B_start, B_start, J_nv,
                            plan.q_scale)

    t_br = net.terms(drive_from_focus(scene, np.asarray(scene.bridges[k].center), plan.aux))
    q = plan.q_scale
    tol = plan.rtol * np.append(net.B_max, q * net.B_max[k])

    def rhs(y, rows):
        t = t_br.take(np.zeros(rows.size, dtype=int))
        B = y[:, :-1]
        dQ = q * t.PBb[:, k] * B[:, k]
        return np.column_stack([net.rhs(B, t), dQ])

    def inside(y, rows):
        B = y[:, :-1]
        return np.all(np.maximum(-B, B - net.B_max) <= tol[:-1], axis=1)

    def clamp(y, rows):
        B = y[:, :-1]
        over = np.maximum(-B, B - net.B_max)
        if np.any(over > tol[:-1]):
            raise InvariantError("Bridge population left [0, B_max] during release")
        y = y.copy()
        y[:, :-1] = np.clip(B, 0.0, net.B_max)
        return y

    def below(y_old, y_new, rows, dt):
        return np.where(y_new[:, k] < floor, 1.0, np.nan)

    y0 = np.append(B1[0], 0.0)[None, :]
    res = ode.integrate(rhs, y0, plan.tau_cap, rtol=plan.rtol, atol=tol, project=clamp, admissible=inside,
                        event=below, trace=True)
    ts = np.asarray(res.trace_t)
    ys = np.asarray(res.trace_y)
    spike = q * t_br.PBb[0, k] * ys[:, k]
    return ChargeRecord(
        illumination_time=nv_illumination_time,
        integrated_charge=float(res.y[0, -1]),
        spike_t=ts,
        spike_I=spike,
        B_start=B_start,
        B_end=float(res.y[0, k]),
        J_nv=J_nv,
        q_scale=q,
    )


def charge_vs_time(scene: Scene, plan: ScanPlan, times: Sequence[float]) -> list[ChargeRecord]:
    return [run_discharge(scene, plan, t) for t in times]


# ---------------------------------------------------------------- decay

def run_decay(scene: Scene, plan: ScanPlan, focus, duration: float = 60.0) -> DecayRecord:
    """Current after the focus leaves the settled NV spot for ``focus``."""
    net = Network(scene, plan.bias)
    _, B_ref, _ = reference_state(scene, plan, net)
    t_pix = net.terms(drive_from_focus(scene, np.asarray(focus, dtype=float), plan.aux))
    res = _evolve(net, t_pix, B_ref[None, :], duration, plan.rtol, trace=True)
    ts = np.asarray(res.trace_t)
    J = net.current(np.asarray(res.trace_y), _tile(t_pix, ts.size))
    below = np.flatnonzero(np.abs(J) < 0.01 * abs(J[0]))
    if below.size and below[0] > 0:
        i = below[0]
        # linear interpolation between the bracketing samples
        j0, j1 = abs(J[i - 1]), abs(J[i])
        target = 0.01 * abs(J[0])
        t1 = ts[i - 1] + (ts[i] - ts[i - 1]) * (j0 - target) / (j0 - j1)
    else:
        t1 = math.nan
    return DecayRecord(t=ts, J=J, t_one_percent=float(t1))


# ---------------------------------------------------------------- sweeps

def _setting_terms(net: Network, scene: Scene, plan: ScanPlan, pairs, mw_on=False) -> Terms:
    """Terms at the NV spot for (main, aux) power pairs; aux is aimed at the target Bridge."""
    focus = home_focus(scene, plan)
    offset = (0.0, 0.0, 0.0)
    if scene.bridges:
        offset = tuple(np.asarray(scene.bridges[plan.bridge].center) - focus)
    P_nv, P_s, P_b = [], [], []
    for main, aux in pairs:
        sc = scene.with_optics(laser_power=main, aux_power=aux, aux_offset=offset)
        d = drive_from_focus(sc, focus, aux_on=aux > 0)
        P_nv.append(d.P_nv)
        P_s.append(d.P_s)
        P_b.append(d.P_b)
    drives = Drives(np.concatenate(P_nv), np.concatenate(P_s), np.concatenate(P_b))
    return net.terms(drives, mw_on)


def run_power_sweep(scene: Scene, plan: ScanPlan, main_powers, aux_powers) -> np.ndarray:
    """Steady NV-spot current for every (P_main, P_aux); rows of (P_main, P_aux, J)."""
    main = np.asarray(main_powers, dtype=float)
    aux = np.asarray(aux_powers, dtype=float)
    if np.any(main <= 0) or np.any(aux < 0):
        raise ValueError("main powers must be positive and aux powers non-negative")
    pairs = [(m, a) for a in aux for m in main]
    net = Network(scene, plan.bias)
    J, _ = net.steady(_setting_terms(net, scene, plan, pairs))
    return np.column_stack([np.array(pairs), J])


def run_contrast_sweep(scene: Scene, plan: ScanPlan, main_powers=None, aux_powers=None) -> list[tuple[float, float, ContrastPair]]:
    """PL and PC contrast at the NV spot with the microwave toggled.

    Sweeps main power at zero aux, or aux power at the scene's laser power.
    Returns (P_main, P_aux, ContrastPair) per setting.
    """
    if (main_powers is None) == (aux_powers is None):
        raise ValueError("give exactly one of main_powers and aux_powers")
    if main_powers is not None:
        pairs = [(float(m), 0.0) for m in main_powers]
    else:
        pairs = [(scene.optics.laser_power, float(a)) for a in aux_powers]
    net = Network(scene, plan.bias)
    off = _setting_terms(net, scene, plan, pairs, mw_on=False)
    on = _setting_terms(net, scene, plan, pairs, mw_on=True)
    J_off, _ = net.steady(off)
    J_on, _ = net.steady(on)
    out = []
    for i, (m, a) in enumerate(pairs):
        out.append((m, a, contrast_pair(off.G[i], on.G[i], float(J_off[i]), float(J_on[i]))))
    return out


def current_vs_generation(scene: Scene, plan: ScanPlan, factors, main_power=None, aux_power=0.0):
    """Steady NV-spot current when the generation rate is scaled by ``factors``.

    Everything else (Source and Bridge illumination) stays at the chosen
    setting, so the samples trace J(G) as the microwave would move it.
    Returns (G, J) arrays.
    """
    main = scene.optics.laser_power if main_power is None else main_power
    net = Network(scene, plan.bias)
    base = _setting_terms(net, scene, plan, [(main, aux_power)])
    f = np.asarray(factors, dtype=float)
    G = base.G[0] * f
    terms = Terms(G=G, Ga=G[:, None] ** net.a[None, :], PBb=np.repeat(base.PBb, f.size, axis=0),
                  W=np.repeat(base.W, f.size, axis=0), bg=np.repeat(base.bg, f.size))
    J, _ = net.steady(terms)
    return G, J


# ---------------------------------------------------------------- analysis

def dark_spots(reaction_map: np.ndarray, reference: float, drop: float = 0.3):
    """Connected regions where the reaction map sits more than ``drop`` below ``reference``.

    Returns (count, list of (row, col) centroids in pixel units).
    """
    mask = np.abs(reaction_map) < (1.0 - drop) * abs(reference)
    labels, count = ndimage.label(mask)
    centroids = ndimage.center_of_mass(mask, labels, range(1, count + 1)) if count else []
    return count, [tuple(map(float, c)) for c in centroids]


def half_widths(profile_map: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Full width at half maximum of every row, linear interpolation between samples."""
    out = np.full(profile_map.shape[0], np.nan)
    for i, row in enumerate(profile_map):
        peak = int(np.argmax(row))
        top = row[peak]
        if not top > 0:
            continue
        half = 0.5 * top
        edges = []
        for step in (-1, 1):
            j = peak
            while 0 <= j + step < row.size and row[j + step] >= half:
                j += step
            if not 0 <= j + step < row.size:
                edges.append(coords[j])
                continue
            a, b = row[j], row[j + step]
            edges.append(coords[j] + (coords[j + step] - coords[j]) * (a - half) / (a - b))
        out[i] = abs(edges[1] - edges[0])
    return out
