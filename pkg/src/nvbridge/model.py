"""
Bridge-population rate equation and the photocurrent law.

Units: currents in pA, powers in mW, time in s, Bridge population
dimensionless (normalised so that B_max is of order one).  All capture
cross-sections are absorbed into the exponents' prefactors.

    dB/dt = G^a (B_max - B) - P_B^b B - n_rec B
    J     = (B^c + 1) P_S^d J_S(U)
    n_rec = kappa_rec |J|

The "simplified" form drops the unamplified ``+1`` term of the current law.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import ode
from .photophysics import IVCurve, iv_current

BISECTION_RTOL = 1e-12
BISECTION_MAX_ITER = 200


class DomainError(ValueError):
    """Input outside the model's domain."""


class ConvergenceError(RuntimeError):
    """Fixed-point solve did not reach its tolerance."""


class InvariantError(RuntimeError):
    """Integrated state left its admissible range by more than the tolerance."""


@dataclass(frozen=True)
class ModelParams:
    a: float = 2.0
    b: float = 2.0
    c: float = 2.0
    d: float = 1.0
    B_max: float = 1.0
    kappa_rec: float = 0.0
    g_nv: float = 1.0
    p_sat: float = math.inf

    def __post_init__(self):
        for name in ("a", "b", "c", "d"):
            if not getattr(self, name) > 0:
                raise DomainError(f"exponent {name} must be positive")
        if not self.B_max > 0:
            raise DomainError("B_max must be positive")
        if not self.kappa_rec >= 0:
            raise DomainError("kappa_rec must be non-negative")
        if not self.g_nv > 0:
            raise DomainError("g_nv must be positive")
        if not self.p_sat > 0:
            raise DomainError("p_sat must be positive")

    @property
    def exponents(self) -> tuple[float, float, float, float]:
        return (self.a, self.b, self.c, self.d)


@dataclass(frozen=True)
class DriveInputs:
    """Constant drive.  ``G`` already includes any microwave reduction."""

    G: float = 0.0
    P_B: float = 0.0
    P_S: float = 0.0
    U: float = 0.0
    mw_on: bool = False

    def __post_init__(self):
        for name in ("G", "P_B", "P_S"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise DomainError(f"{name} must be finite and non-negative, got {v!r}")


@dataclass(frozen=True)
class SystemState:
    t: float
    B: float
    J: float


@dataclass(frozen=True)
class ContrastPair:
    C_PL: float
    C_PC: float
    intercept_B: float
    J_off: float = math.nan
    J_on: float = math.nan

    @property
    def ratio(self) -> float:
        return self.C_PC / self.C_PL

    def identity_residual(self) -> float:
        """|C_PC/C_PL - (1 - intercept_B/J_off)|, zero up to rounding."""
        return abs(self.C_PC / self.C_PL - (1.0 - self.intercept_B / self.J_off))


IVLike = Union[IVCurve, float]


def source_drive(drive: DriveInputs, params: ModelParams, iv: IVLike) -> float:
    """P_S^d * J_S(U); a bare number for ``iv`` is taken as J_S(U) itself."""
    if isinstance(iv, IVCurve):
        js = iv_current(iv, drive.U, illuminated=drive.P_S > 0)
    else:
        js = float(iv)
    return drive.P_S ** params.d * js


def bridge_rate(state: SystemState, drive: DriveInputs, params: ModelParams, n_rec: float) -> float:
    """dB/dt for the given population, drive and recombination rate."""
    if n_rec < 0:
        raise DomainError("n_rec must be non-negative")
    B = state.B
    return drive.G ** params.a * (params.B_max - B) - drive.P_B ** params.b * B - n_rec * B


def source_current(
    B: float, drive: DriveInputs, params: ModelParams, iv: IVLike, use_simplified: bool = False
) -> float:
    tol = BISECTION_RTOL * params.B_max
    if not -tol <= B <= params.B_max + tol:
        raise DomainError(f"B={B!r} outside [0, B_max]")
    B = min(max(B, 0.0), params.B_max)
    gain = B ** params.c + (0.0 if use_simplified else 1.0)
    return gain * source_drive(drive, params, iv)


def steady_population(G: float, P_B: float, n_rec: float, params: ModelParams) -> float:
    """Fixed point of the rate equation, G^a B_max / (G^a + P_B^b + n_rec)."""
    Ga = G ** params.a
    if Ga == 0.0:
        return 0.0
    return Ga * params.B_max / (Ga + P_B ** params.b + n_rec)


def steady_state_current(
    drive: DriveInputs, params: ModelParams, iv: IVLike, use_simplified: bool = False
) -> float:
    """Self-consistent steady current with n_rec = kappa_rec |J|.

    Solves h(J) = J - f(J) = 0 by bisection; f is nonincreasing so h has
    exactly one root, and it lies in [f(f(0)), f(0)].
    """
    w = source_drive(drive, params, iv)
    if w == 0.0:
        return 0.0
    sign, w = math.copysign(1.0, w), abs(w)
    extra = 0.0 if use_simplified else 1.0

    def f(J):
        return (steady_population(drive.G, drive.P_B, params.kappa_rec * J, params) ** params.c + extra) * w

    # f decreasing: the root lies in [f(f(0)), f(0)]
    hi = f(0.0)
    if hi == 0.0:
        return 0.0
    lo = f(hi)
    for _ in range(BISECTION_MAX_ITER):
        if hi - lo <= max(BISECTION_RTOL * hi, sys.float_info.min):
            return sign * 0.5 * (lo + hi)
        # geometric midpoint keeps the iteration count bounded for roots far below f(0)
        mid = math.sqrt(lo) * math.sqrt(hi) if lo > 0 else 0.5 * (lo + hi)
        if mid - f(mid) > 0:
            hi = mid
        else:
            lo = mid
    raise ConvergenceError("bisection did not converge")


def solve_current(Ga, PBb, W, B_max, c, kappa, background=0.0, plus_one=1.0, guess=None, max_iter=200):
    """Vectorised steady current for one or more Bridges sharing one current.

    Arrays broadcast over a leading batch shape with the Bridge index last:
    ``J = sum_k (s_k(J)^c_k + plus_one) W_k + background`` where
    ``s_k(J) = Ga_k B_max_k / (Ga_k + PBb_k + kappa_k |J|)``.  W and the
    background must share one sign.  Newton's method on J - f(J) is monotone
    from below because f is convex and decreasing; a guess above the root
    lands below it after one step.  Steps that leave the current bracket
    (possible when the slope overflows at tiny G) are replaced by bisection.
    Returns (J, s).
    """
    Ga, PBb, W = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (Ga, PBb, W)))
    background = np.asarray(background, dtype=float)
    total_w = np.sum(W, axis=-1) + background
    sign = np.where(total_w < 0, -1.0, 1.0)
    Wm = np.abs(W)
    bgm = np.abs(background)

    def pieces(J):
        D = Ga + PBb + kappa * J[..., None]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            s = np.where(Ga > 0, Ga * B_max / D, 0.0)
            sc = s ** c
            f = np.sum((sc + plus_one) * Wm, axis=-1) + bgm
            df = -np.sum(np.where(Ga > 0, c * sc * kappa / D, 0.0) * Wm, axis=-1)
        return f, df, s

    # the root lies in [f(f(0)), f(0)]; Newton steps leaving the bracket fall back to bisection
    f0, _, _ = pieces(np.zeros(total_w.shape))
    lo, hi = pieces(f0)[0], f0
    J = f0.copy() if guess is None else np.abs(np.asarray(guess, dtype=float))
    J = np.clip(np.broadcast_to(J, total_w.shape), lo, hi)
    eps = 64 * np.finfo(float).eps
    for _ in range(max_iter):
        f, df, s = pieces(J)
        h = J - f
        # rounding in J - f(J) leaves a few-ulp limit cycle; 64 eps is far inside 1e-12
        done = (np.abs(h) <= eps * np.maximum(J, f)) | (hi - lo <= eps * hi)
        if np.all(done):
            break
        lo = np.where(h < 0, J, lo)
        hi = np.where(h > 0, J, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            J_new = J - h / (1.0 - df)
        bad = ~np.isfinite(J_new) | (J_new < lo) | (J_new > hi) | (J_new == J)
        mid = np.where(lo > 0, np.sqrt(lo) * np.sqrt(hi), 0.5 * (lo + hi))
        J = np.where(done, J, np.where(bad, mid, J_new))
    else:
        raise ConvergenceError("Newton iteration did not settle")
    _, _, s = pieces(J)
    return sign * J, s


def integrate_transient(
    initial: SystemState,
    drive_schedule: Sequence[tuple[float, DriveInputs]],
    params: ModelParams,
    iv: IVLike,
    dt_max: float = 0.1,
    use_simplified: bool = False,
    rtol: float = 1e-8,
) -> list[SystemState]:
    """Integrate the Bridge population through a piecewise-constant schedule.

    ``drive_schedule`` is an ordered list of ``(duration, drive)`` segments.
    Returns one SystemState per accepted step, J recomputed from B.
    """
    if not dt_max > 0:
        raise DomainError("dt_max must be positive")
    tol = rtol * params.B_max
    if not -tol <= initial.B <= params.B_max + tol:
        raise DomainError("initial B outside [0, B_max]")
    extra = 0.0 if use_simplified else 1.0
    B_max, c, kappa = params.B_max, params.c, params.kappa_rec

    def current(B, w):
        return (np.maximum(B, 0.0) ** c + extra) * w

    def inside(y, rows):
        return np.max(np.maximum(-y, y - B_max), axis=1) <= tol

    def clamp(y, rows):
        over = np.maximum(-y, y - B_max)
        if np.any(over > tol):
            raise InvariantError(f"B left [0, B_max] by {float(np.max(over)):.3e}")
        return np.clip(y, 0.0, B_max)

    t0 = initial.t
    B = float(min(max(initial.B, 0.0), B_max))
    w0 = source_drive(drive_schedule[0][1], params, iv) if drive_schedule else 0.0
    out = [SystemState(t0, B, float(current(B, w0)))]
    for duration, drive in drive_schedule:
        if duration < 0:
            raise DomainError("segment durations must be non-negative")
        Ga = drive.G ** params.a
        PBb = drive.P_B ** params.b
        w = source_drive(drive, params, iv)

        def rhs(y, rows, Ga=Ga, PBb=PBb, w=w):
            return Ga * (B_max - y) - PBb * y - kappa * np.abs(current(y, w)) * y

        res = ode.integrate(rhs, np.array([[B]]), duration, rtol=rtol, atol=tol, dt_max=dt_max,
                            project=clamp, admissible=inside, trace=True)
        for tt, yy in zip(res.trace_t[1:], res.trace_y[1:]):
            Bi = float(yy[0])
            out.append(SystemState(t0 + tt, Bi, float(current(Bi, w))))
        B = float(res.y[0, 0])
        t0 += duration
    return out


def contrast_pair(G_off: float, G_on: float, J_off: float, J_on: float) -> ContrastPair:
    """Contrasts and the intercept of the secant through (G_on, J_on), (G_off, J_off)."""
    if J_off == 0:
        raise DomainError("J_off must be non-zero")
    C_PL = (G_off - G_on) / G_off
    C_PC = (J_off - J_on) / J_off
    if G_off == G_on:
        return ContrastPair(C_PL, C_PC, J_off, J_off, J_on)
    slope = (J_off - J_on) / (G_off - G_on)
    return ContrastPair(C_PL, C_PC, J_off - slope * G_off, J_off, J_on)


def contrast_from_curve(
    J_of_G: Union[Callable[[float], float], tuple[Sequence[float], Sequence[float]]],
    G_off: float,
    C_PL: float,
) -> ContrastPair:
    """PC contrast implied by a J(G) curve when MW lowers G by C_PL.

    ``J_of_G`` is a callable or a sampled ``(G, J)`` pair; samples are
    interpolated with a shape-preserving cubic.
    """
    if not 0.0 < C_PL < 1.0:
        raise DomainError("C_PL must lie in (0, 1)")
    G_on = (1.0 - C_PL) * G_off
    if callable(J_of_G):
        J = J_of_G
    else:
        Gs, Js = (np.asarray(v, dtype=float) for v in J_of_G)
        order = np.argsort(Gs)
        Gs, Js = Gs[order], Js[order]
        if G_on < Gs[0] or G_off > Gs[-1]:
            raise DomainError("G_off/G_on outside the sampled range")
        spline = PchipInterpolator(Gs, Js)

        def J(g):
            return float(spline(g))

    return contrast_pair(G_off, G_on, float(J(G_off)), float(J(G_on)))
