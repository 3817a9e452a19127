"""
Adaptive explicit integration with step-doubling error control.

Classic RK4 is taken once with step h and twice with h/2; the difference
estimates the local error (divided by 15) and is also added back to the
half-step result (local extrapolation).  The integrator works on a batch of
independent systems, state shape ``(N, K)``.  Every row carries its own
clock and its own step size, so a row's trajectory never depends on which
other rows share the batch.

The right-hand side is autonomous and is called as ``rhs(y, rows)`` where
``rows`` holds the indices of the batch rows that ``y`` belongs to.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Rhs = Callable[[np.ndarray, np.ndarray], np.ndarray]


class StepSizeError(RuntimeError):
    """Step size shrank below the representable limit."""


@dataclass
class Integration:
    y: np.ndarray
    t: np.ndarray
    t_event: np.ndarray
    steps: int = 0
    rejected: int = 0
    trace_t: list[float] = field(default_factory=list)
    trace_y: list[np.ndarray] = field(default_factory=list)


def _rk4(rhs: Rhs, y: np.ndarray, rows: np.ndarray, h: np.ndarray, k1: np.ndarray) -> np.ndarray:
    k2 = rhs(y + 0.5 * h * k1, rows)
    k3 = rhs(y + 0.5 * h * k2, rows)
    k4 = rhs(y + h * k3, rows)
    return y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(
    rhs: Rhs,
    y0: np.ndarray,
    duration,
    *,
    rtol: float = 1e-8,
    atol=None,
    dt_max: float = np.inf,
    h0: float | None = None,
    project: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    admissible: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
    event: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None,
    trace: bool = False,
    max_steps: int = 1_000_000,
) -> Integration:
    """Integrate every row of ``y0`` forward by ``duration``.

    ``atol`` may be a scalar or a length-K vector; it defaults to ``rtol``.
    ``project(y, rows)`` runs after each accepted step (clamping hook).
    ``admissible(y, rows)`` returns a per-row mask; a step whose result is
    not admissible is rejected and retried with half the step size.
    ``event(y_old, y_new, rows, h)`` returns, per row, the fraction of the
    step at which the row's stopping condition was met (NaN if not met);
    rows whose event fires stop there.  ``trace`` records every accepted
    step and needs a single-row batch.
    """
    y = np.array(y0, dtype=float, copy=True)
    if y.ndim != 2:
        raise ValueError("state must have shape (N, K)")
    n = y.shape[0]
    t_end = np.broadcast_to(np.asarray(duration, dtype=float), (n,)).copy()
    if np.any(t_end < 0):
        raise ValueError("duration must be non-negative")
    if trace and n != 1:
        raise ValueError("trace needs a single-row batch")
    atol_v = np.broadcast_to(np.asarray(rtol if atol is None else atol, dtype=float), (y.shape[1],))

    t = np.zeros(n)
    t_event = np.full(n, np.nan)
    first = min(dt_max, 1e-3) if h0 is None else h0
    h = np.minimum(np.full(n, first), np.maximum(t_end, 1e-300))
    active = t_end > 0
    result = Integration(y=y, t=t, t_event=t_event)
    if trace:
        result.trace_t.append(0.0)
        result.trace_y.append(y[0].copy())

    steps = 0
    while np.any(active):
        steps += 1
        if steps > max_steps:
            raise StepSizeError("step budget exhausted")
        rows = np.flatnonzero(active)
        yr = y[rows]
        hr = np.minimum(np.minimum(h[rows], dt_max), t_end[rows] - t[rows])[:, None]
        k1 = rhs(yr, rows)
        full = _rk4(rhs, yr, rows, hr, k1)
        half = _rk4(rhs, yr, rows, 0.5 * hr, k1)
        two = _rk4(rhs, half, rows, 0.5 * hr, rhs(half, rows))
        delta = (two - full) / 15.0
        scale = atol_v + rtol * np.maximum(np.abs(two), np.abs(yr))
        err = np.max(np.abs(delta) / scale, axis=1)
        err = np.where(np.isfinite(err), err, np.inf)
        ok = err <= 1.0

        fac = np.where(err > 0, 0.9 * np.power(np.maximum(err, 1e-300), -0.2), 4.0)
        fac = np.clip(fac, 0.2, 4.0)
        hnew = hr[:, 0] * fac
        if admissible is not None:
            # an unstable step can pass the error test and still leave the domain
            inside = np.asarray(admissible(two + delta, rows), dtype=bool)
            hnew = np.where(ok & ~inside, np.minimum(hnew, 0.5 * hr[:, 0]), hnew)
            ok &= inside
        if np.any(~ok & (hnew < 1e-14 * np.maximum(1.0, t_end[rows]))):
            raise StepSizeError("step size underflow")

        acc = rows[ok]
        if acc.size:
            y_new = (two + delta)[ok]
            if project is not None:
                y_new = project(y_new, acc)
            dt = hr[ok, 0]
            if event is not None:
                frac = np.asarray(event(y[acc], y_new, acc, dt), dtype=float)
                hit = np.isfinite(frac)
                if np.any(hit):
                    t_event[acc[hit]] = t[acc[hit]] + np.clip(frac[hit], 0.0, 1.0) * dt[hit]
                    active[acc[hit]] = False
            y[acc] = y_new
            t[acc] = t[acc] + dt
            done = t[acc] >= t_end[acc] * (1.0 - 1e-15)
            t[acc[done]] = t_end[acc[done]]
            active[acc[done]] = False
            result.steps += int(acc.size)
            if trace:
                result.trace_t.append(float(t[0]))
                result.trace_y.append(y[0].copy())
        result.rejected += int(rows.size - acc.size)
        h[rows] = hnew
    return result
