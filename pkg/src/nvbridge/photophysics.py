"""NV generation rate, PL intensity and the Source current-voltage law."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# exp() argument cap for the forward diode branch
_MAX_EXP_ARG = 60.0


@dataclass(frozen=True)
class NVCentre:
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    g_nv: float = 1.0
    p_sat: float = math.inf
    odmr_contrast: float = 0.2
    k_r_rel: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        if len(self.position) != 3 or not all(math.isfinite(v) for v in self.position):
            raise ValueError("NV position must be a finite 3-vector")
        if not self.g_nv > 0:
            raise ValueError("g_nv must be positive")
        if not self.p_sat > 0:
            raise ValueError("p_sat must be positive")
        if not 0.0 <= self.odmr_contrast <= 0.5:
            raise ValueError("odmr_contrast must lie in [0, 0.5]")
        if not self.k_r_rel > 0:
            raise ValueError("k_r_rel must be positive")


@dataclass(frozen=True)
class IVCurve:
    """Rectifying Source characteristic at zero Bridge population."""

    J0: float = 1.0
    U0: float = 1.0
    reverse_leak: float = 0.01
    dark_gate: bool = True

    def __post_init__(self):
        if not self.J0 >= 0:
            raise ValueError("J0 must be non-negative")
        if not self.U0 > 0:
            raise ValueError("U0 must be positive")
        if not 0.0 <= self.reverse_leak <= 0.05:
            raise ValueError("reverse_leak must lie in [0, 0.05]")


def _saturation(nv: NVCentre, P):
    return P / (1.0 + P / nv.p_sat)


def generation_rate(nv: NVCentre, P_NV, mw_on: bool = False):
    """Charge-carrier generation rate G = g_nv * P^2 / (1 + P/p_sat).

    On microwave resonance G drops by the same fraction as the PL.
    Accepts scalars or arrays of power.
    """
    P = np.asarray(P_NV, dtype=float)
    if np.any(P < 0):
        raise ValueError("P_NV must be non-negative")
    G = nv.g_nv * P * _saturation(nv, P)
    if mw_on:
        G = G * (1.0 - nv.odmr_contrast)
    return G if G.ndim else float(G)


def pl_intensity(nv: NVCentre, P_NV, mw_on: bool = False):
    """PL intensity (arbitrary units), saturating linearly in power.

    Chosen so that generation_rate == (g_nv / k_r_rel) * I * P exactly.
    """
    P = np.asarray(P_NV, dtype=float)
    if np.any(P < 0):
        raise ValueError("P_NV must be non-negative")
    intensity = nv.k_r_rel * _saturation(nv, P)
    if mw_on:
        intensity = intensity * (1.0 - nv.odmr_contrast)
    return intensity if intensity.ndim else float(intensity)


def iv_current(iv: IVCurve, U, illuminated=True):
    """Source current J_S(U) in pA.

    Zero in the dark when the curve is dark-gated; otherwise a diode-like
    branch J0*(exp(U/U0) - 1) for U >= 0 and a small leak for U < 0.
    """
    U = np.asarray(U, dtype=float)
    x = np.minimum(U / iv.U0, _MAX_EXP_ARG)
    forward = iv.J0 * np.expm1(np.maximum(x, 0.0))
    reverse = -iv.reverse_leak * iv.J0 * -np.expm1(np.minimum(x, 0.0))
    J = np.where(U >= 0, forward, reverse)
    if iv.dark_gate:
        J = np.where(np.asarray(illuminated, dtype=bool), J, 0.0)
    return J if J.ndim else float(J)
