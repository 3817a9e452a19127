"""
Scene-level coupling of NVs, Bridges and Sources.

Every Bridge collects carriers generated by all NVs in the scene and
amplifies the Sources that share its electrode.  All Bridges and Sources
feed one measured current, so the recombination term of each Bridge sees the
total current.  Sources on an electrode without a Bridge contribute an
unamplified background.  Scenes always use the full current law (with the
``+1`` term).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import solve_current
from .optics import Drives, Scene
from .photophysics import generation_rate, iv_current


@dataclass(frozen=True)
class Terms:
    """Rate-equation coefficients for a batch of N drives and K Bridges."""

    G: np.ndarray    # (N,) total generation rate
    Ga: np.ndarray   # (N, K)
    PBb: np.ndarray  # (N, K)
    W: np.ndarray    # (N, K) summed P_S^d J_S(U) per Bridge
    bg: np.ndarray   # (N,) unamplified Sources

    def take(self, rows) -> "Terms":
        return Terms(self.G[rows], self.Ga[rows], self.PBb[rows], self.W[rows], self.bg[rows])


class Network:
    """Arrays extracted once from a Scene for fast batched evaluation."""

    def __init__(self, scene: Scene, bias: float):
        self.scene = scene
        self.bias = float(bias)
        prm = [scene.params[b.params] for b in scene.bridges]
        self.K = len(scene.bridges)
        self.a = np.array([p.a for p in prm])
        self.b = np.array([p.b for p in prm])
        self.c = np.array([p.c for p in prm])
        self.B_max = np.array([p.B_max for p in prm])
        self.kappa = np.array([p.kappa_rec for p in prm])

        by_electrode = {b.electrode: k for k, b in enumerate(scene.bridges)}
        self.source_bridge = np.array([by_electrode.get(s.electrode, -1) for s in scene.sources], dtype=int)
        # a Source uses the d of the Bridge it feeds, else of the first params entry
        self.source_d = np.array(
            [prm[k].d if k >= 0 else scene.params[0].d for k in self.source_bridge], dtype=float
        )
        self.source_js = np.array([iv_current(s.iv, self.bias, illuminated=True) for s in scene.sources])
        self.source_gated = np.array([s.iv.dark_gate for s in scene.sources], dtype=bool)
        self.route = np.zeros((len(scene.sources), self.K))
        for i, k in enumerate(self.source_bridge):
            if k >= 0:
                self.route[i, k] = 1.0

    def terms(self, drives: Drives, mw_on: bool = False) -> Terms:
        n = drives.P_nv.shape[0]
        G = np.zeros(n)
        for i, nv in enumerate(self.scene.nvs):
            G = G + generation_rate(nv, drives.P_nv[:, i], mw_on)
        Ga = G[:, None] ** self.a[None, :]
        PBb = drives.P_b ** self.b[None, :]
        Ps = drives.P_s
        js = np.where(self.source_gated[None, :] & (Ps <= 0), 0.0, self.source_js[None, :])
        w_src = Ps ** self.source_d[None, :] * js
        W = w_src @ self.route
        bg = np.sum(np.where(self.source_bridge[None, :] < 0, w_src, 0.0), axis=1)
        return Terms(G=G, Ga=Ga, PBb=PBb, W=W, bg=bg)

    def current(self, B: np.ndarray, t: Terms) -> np.ndarray:
        """Total current for populations B of shape (N, K)."""
        return np.sum((np.maximum(B, 0.0) ** self.c + 1.0) * t.W, axis=1) + t.bg

    def rhs(self, B: np.ndarray, t: Terms) -> np.ndarray:
        J = self.current(B, t)
        return t.Ga * (self.B_max - B) - t.PBb * B - self.kappa * np.abs(J)[:, None] * B

    def steady(self, t: Terms) -> tuple[np.ndarray, np.ndarray]:
        """Steady (J, B) for every row of the batch."""
        if self.K == 0:
            return t.bg.copy(), np.zeros((t.bg.shape[0], 0))
        return solve_current(t.Ga, t.PBb, t.W, self.B_max, self.c, self.kappa, background=t.bg)
