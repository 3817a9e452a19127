"""
Power-sweep fitting of the simplified steady-state model.

The fitted model is

    J = (G^a B_max / (G^a + P_aux^b + kappa J))^c  P_main^d  J_S0,   G = g P_main^2

with integer exponents chosen by discrete search and (B_max, g, kappa, J_S0)
estimated by Levenberg-Marquardt in log space.  B_max and J_S0 enter only
through B_max^c J_S0, so one of them is held fixed: J_S0 when the dataset
carries it in ``meta['js0']``, otherwise B_max = 1.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .model import DriveInputs, ModelParams, solve_current, steady_state_current

NAMES = ("B_max", "g_nv", "kappa_rec", "J_S0")
ALL_EXPONENTS = tuple(itertools.product((1, 2), repeat=4))


class FitError(RuntimeError):
    """Every exponent candidate failed to converge."""


@dataclass
class SweepDataset:
    """Rows of (P_main mW, P_aux mW, J pA, sigma pA)."""

    rows: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float).reshape(-1, 4)
        if self.rows.shape[0] < 8:
            raise ValueError("a sweep needs at least 8 rows")
        if not np.all(self.rows[:, 3] > 0):
            raise ValueError("sigma must be positive")
        if np.any(self.rows[:, 0] <= 0) or np.any(self.rows[:, 1] < 0):
            raise ValueError("P_main must be positive and P_aux non-negative")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("sweep values must be finite")
        span = self.rows[:, 0].max() / self.rows[:, 0].min()
        if span < 10 * (1 - 1e-9):
            raise ValueError("P_main must span at least one decade")

    @property
    def P_main(self):
        return self.rows[:, 0]

    @property
    def P_aux(self):
        return self.rows[:, 1]

    @property
    def J(self):
        return self.rows[:, 2]

    @property
    def sigma(self):
        return self.rows[:, 3]


@dataclass(frozen=True)
class Asymptote:
    d: int
    slope: float
    amplitude: float
    ambiguous: bool

    @property
    def candidates(self) -> tuple[int, ...]:
        return (1, 2) if self.ambiguous else (self.d,)


@dataclass
class CandidateFit:
    exponents: tuple[int, int, int, int]
    residual: float
    values: dict
    converged: bool
    iterations: int


@dataclass
class FitReport:
    best: ModelParams
    J_S0: float
    residual: float
    exponent_table: list[CandidateFit]
    covariance: np.ndarray
    cov_names: tuple[str, ...]
    converged: bool
    asymptote: Asymptote | None = None
    fixed: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        b = self.best
        return {
            "best": {"a": b.a, "b": b.b, "c": b.c, "d": b.d, "B_max": b.B_max, "g_nv": b.g_nv,
                     "kappa_rec": b.kappa_rec, "J_S0": self.J_S0},
            "residual": self.residual,
            "converged": self.converged,
            "fixed": self.fixed,
            "covariance": {"names": list(self.cov_names), "matrix": self.covariance.tolist()},
            "asymptote": None if self.asymptote is None else {
                "d": self.asymptote.d, "slope": self.asymptote.slope,
                "amplitude": self.asymptote.amplitude, "ambiguous": self.asymptote.ambiguous},
            "exponent_table": [
                {"a": c.exponents[0], "b": c.exponents[1], "c": c.exponents[2], "d": c.exponents[3],
                 "residual": c.residual, "converged": c.converged, "iterations": c.iterations, **c.values}
                for c in self.exponent_table
            ],
        }


@dataclass(frozen=True)
class FitOptions:
    starts: int = 20
    bounds: tuple[float, float] = (1e-2, 1e2)
    max_iter: int = 200
    fd_step: float = 1e-6
    keep: int = 3  # starts per candidate kept after the screening phase
    screen_iter: int = 8
    seed: int = 0


# ---------------------------------------------------------------- forward model

def predict(params: ModelParams, J_S0: float, grid) -> np.ndarray:
    """Steady simplified-form current for each (P_main, P_aux) row of ``grid``."""
    grid = np.asarray(grid, dtype=float).reshape(-1, 2)
    out = np.empty(grid.shape[0])
    for i, (pm, pa) in enumerate(grid):
        drive = DriveInputs(G=params.g_nv * pm**2, P_B=pa, P_S=pm)
        out[i] = steady_state_current(drive, params, J_S0, use_simplified=True)
    return out


def synthetic_sweep(params: ModelParams, J_S0: float, main_powers, aux_powers,
                    noise: float = 0.0, seed: int = 0) -> SweepDataset:
    """Sweep generated by ``predict`` with optional relative Gaussian noise.

    sigma is ``noise`` times the noiseless current (or 1 % when noise is 0).
    """
    grid = np.array([(m, a) for a in aux_powers for m in main_powers], dtype=float)
    J = predict(params, J_S0, grid)
    rel = noise if noise > 0 else 0.01
    sigma = rel * np.abs(J)
    if noise > 0:
        J = J + np.random.default_rng(seed).normal(0.0, 1.0, J.shape) * sigma
    meta = {"js0": J_S0, "generator": dict(a=params.a, b=params.b, c=params.c, d=params.d,
                                            B_max=params.B_max, g_nv=params.g_nv,
                                            kappa_rec=params.kappa_rec), "noise": noise, "seed": seed}
    return SweepDataset(np.column_stack([grid, J, sigma]), meta)


def _batched_model(theta, exps, P, A, guess=None):
    """Simplified-form current for M parameter sets over n data rows.

    theta: (M, 4) natural parameters in NAMES order; exps: (M, 4).
    Returns (M, n).
    """
    Bm, g, kap, js = (theta[:, i:i + 1] for i in range(4))
    a, b, c, d = (exps[:, i:i + 1] for i in range(4))
    Ga = (g * P[None, :] ** 2) ** a
    PBb = A[None, :] ** b
    W = P[None, :] ** d * js
    J, _ = solve_current(Ga[..., None], PBb[..., None], W[..., None], Bm[..., None], c[..., None],
                         kap[..., None], plus_one=0.0, guess=guess)
    return J


# ---------------------------------------------------------------- asymptote

def fit_asymptote_d(data: SweepDataset) -> Asymptote:
    """Log-log slope of J over the top decade of P_main at zero aux power."""
    mask = data.P_aux == 0
    top = data.P_main[mask].max() if np.any(mask) else math.nan
    sel = mask & (data.P_main >= top / 10 * (1 - 1e-12))
    if np.count_nonzero(sel) < 2 or np.ptp(np.log(data.P_main[sel])) == 0:
        raise ValueError("need at least two zero-aux rows in the top decade of P_main")
    if np.any(data.J[sel] <= 0):
        raise ValueError("zero-aux currents must be positive for the log-log slope")
    x, y = np.log(data.P_main[sel]), np.log(data.J[sel])
    slope, intercept = np.polyfit(x, y, 1)
    d = int(min(max(round(slope), 1), 2))
    ambiguous = abs(slope - round(slope)) > 0.25 or round(slope) not in (1, 2)
    return Asymptote(d=d, slope=float(slope), amplitude=float(math.exp(intercept)), ambiguous=bool(ambiguous))


# ---------------------------------------------------------------- least squares

class _Problem:
    """Batch of weighted least-squares problems sharing one dataset."""

    def __init__(self, data: SweepDataset, exps: np.ndarray, free: np.ndarray, fixed_values: np.ndarray, h: float):
        self.P, self.A = data.P_main, data.P_aux
        self.J, self.w = data.J, 1.0 / data.sigma
        self.exps = exps
        self.free = free            # indices into NAMES of the fitted parameters
        self.fixed_values = fixed_values  # (4,) natural values used for the fixed slots
        self.h = h

    def natural(self, x, rows):
        theta = np.tile(self.fixed_values, (x.shape[0], 1))
        theta[:, self.free] = np.exp(x)
        return theta

    def residuals(self, x, rows, guess=None):
        Jm = _batched_model(self.natural(x, rows), self.exps[rows], self.P, self.A, guess)
        return (Jm - self.J[None, :]) * self.w[None, :], Jm

    def jacobian(self, x, rows, guess):
        """Central differences in log space, i.e. relative steps in natural units."""
        m, p = x.shape
        shifted = np.repeat(x[:, None, :], 2 * p, axis=1)
        for j in range(p):
            shifted[:, 2 * j, j] += self.h
            shifted[:, 2 * j + 1, j] -= self.h
        rr = np.repeat(rows, 2 * p)
        g = np.repeat(guess, 2 * p, axis=0)
        r, _ = self.residuals(shifted.reshape(m * 2 * p, p), rr, g)
        r = r.reshape(m, p, 2, -1)
        return np.transpose((r[:, :, 0] - r[:, :, 1]) / (2 * self.h), (0, 2, 1))


def _lm(problem: _Problem, x0: np.ndarray, max_iter: int):
    """Batched Levenberg-Marquardt; every row of x0 is an independent problem."""
    x = x0.copy()
    m = x.shape[0]
    rows = np.arange(m)
    lo, hi = math.log(1e-8), math.log(1e8)
    r, Jm = problem.residuals(x, rows)
    cost = np.sum(r * r, axis=1)
    lam = np.full(m, 1e-3)
    active = np.isfinite(cost)
    converged = np.zeros(m, dtype=bool)
    iters = np.zeros(m, dtype=int)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iters[idx] += 1
        Jac = problem.jacobian(x[idx], idx, Jm[idx])
        JtJ = np.einsum("mni,mnj->mij", Jac, Jac)
        grad = np.einsum("mni,mn->mi", Jac, r[idx])
        diag = np.einsum("mii->mi", JtJ)
        A = JtJ + lam[idx, None, None] * (np.eye(x.shape[1])[None] * np.maximum(diag, 1e-12)[:, :, None])
        try:
            step = -np.linalg.solve(A, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = -grad * 1e-3
        trial = np.clip(x[idx] + step, lo, hi)
        r_t, J_t = problem.residuals(trial, idx, Jm[idx])
        cost_t = np.sum(r_t * r_t, axis=1)
        better = np.isfinite(cost_t) & (cost_t <= cost[idx])
        acc = idx[better]
        gain = cost[acc] - cost_t[better]
        x[acc], r[acc], Jm[acc], cost[acc] = trial[better], r_t[better], J_t[better], cost_t[better]
        lam[acc] = np.maximum(lam[acc] / 3.0, 1e-12)
        lam[idx[~better]] *= 4.0
        small_step = np.max(np.abs(step), axis=1) < 1e-11
        flat = np.zeros(idx.size, dtype=bool)
        flat[better] = gain <= 1e-14 * np.maximum(cost[acc], 1e-300)
        tiny = cost[idx] <= 1e-24 * r.shape[1]
        stuck = lam[idx] > 1e12  # no descent direction left: a local minimum
        done = (better & (small_step | flat)) | tiny | stuck
        converged[idx[done]] = True
        active[idx[done]] = False
    return x, cost, converged, iters


def _starts(n_free: int, opts: FitOptions) -> np.ndarray:
    """Latin-hypercube multi-starts, log-spaced over the bounds."""
    lo, hi = np.log(opts.bounds[0]), np.log(opts.bounds[1])
    u = qmc.LatinHypercube(d=n_free, seed=opts.seed).random(opts.starts)
    return lo + (hi - lo) * u


def fit_model(data: SweepDataset, candidates=None, options: FitOptions | None = None) -> FitReport:
    """Fit every exponent candidate and rank them by weighted RMS residual.

    Candidates default to {1,2}^4 restricted to the d found by
    ``fit_asymptote_d`` (both d values when the slope is ambiguous).
    """
    opts = options or FitOptions()
    asym = None
    if candidates is None:
        asym = fit_asymptote_d(data)
        candidates = [e for e in ALL_EXPONENTS if e[3] in asym.candidates]
    candidates = [tuple(int(v) for v in e) for e in candidates]
    if not candidates:
        raise ValueError("no exponent candidates to fit")

    fixed_values = np.ones(4)
    if "js0" in data.meta:
        free = np.array([0, 1, 2])
        fixed_values[3] = float(data.meta["js0"])
        fixed = {"J_S0": fixed_values[3]}
    else:
        free = np.array([1, 2, 3])
        fixed = {"B_max": 1.0}
    starts = _starts(free.size, opts)
    nc, ns = len(candidates), starts.shape[0]
    exps = np.repeat(np.array(candidates, dtype=float), ns, axis=0)
    x0 = np.tile(starts, (nc, 1))
    problem = _Problem(data, exps, free, fixed_values, opts.fd_step)

    # screen all starts briefly, then finish the most promising few per candidate
    x1, cost1, conv1, it1 = _lm(problem, x0, opts.screen_iter)
    cost1 = np.where(np.isfinite(cost1), cost1, np.inf).reshape(nc, ns)
    keep = np.argsort(cost1, axis=1, kind="stable")[:, : max(1, min(opts.keep, ns))]
    sel = (keep + ns * np.arange(nc)[:, None]).ravel()
    sub = _Problem(data, exps[sel], free, fixed_values, opts.fd_step)
    x2, cost2, conv2, it2 = _lm(sub, x1[sel], opts.max_iter)

    n = data.rows.shape[0]
    table = []
    per = sel.size // nc
    for i, e in enumerate(candidates):
        blk = slice(i * per, (i + 1) * per)
        c_blk = np.where(np.isfinite(cost2[blk]), cost2[blk], np.inf)
        j = int(np.argmin(c_blk))
        theta = sub.natural(x2[blk][j:j + 1], None)[0]
        rms = math.sqrt(c_blk[j] / n) if np.isfinite(c_blk[j]) else math.inf
        table.append(CandidateFit(
            exponents=e, residual=rms,
            values={k: float(v) for k, v in zip(NAMES, theta)},
            converged=bool(conv2[blk][j] and np.isfinite(c_blk[j])),
            iterations=int(it1[sel[i * per + j]] + it2[blk][j]),
        ))
    table.sort(key=lambda c: (c.residual, c.exponents))
    ok = [c for c in table if c.converged and math.isfinite(c.residual)]
    if not ok:
        raise FitError("no exponent candidate converged")
    best = ok[0]
    a, b, c, d = best.exponents
    v = best.values
    params = ModelParams(a=a, b=b, c=c, d=d, B_max=v["B_max"], kappa_rec=v["kappa_rec"], g_nv=v["g_nv"])
    cov = covariance(data, best.exponents, v, free, opts.fd_step)
    return FitReport(
        best=params, J_S0=v["J_S0"], residual=best.residual, exponent_table=table,
        covariance=cov, cov_names=tuple(NAMES[i] for i in free), converged=True,
        asymptote=asym, fixed=fixed,
    )


def covariance(data: SweepDataset, exponents, values: dict, free, h: float = 1e-6) -> np.ndarray:
    """(J^T J)^-1 in natural units for the free parameters, sigmas taken as absolute."""
    theta = np.array([values[k] for k in NAMES])
    problem = _Problem(data, np.array([exponents], dtype=float), np.asarray(free), theta, h)
    x = np.log(theta[free])[None, :]
    _, Jm = problem.residuals(x, np.array([0]))
    Jac = problem.jacobian(x, np.array([0]), Jm)[0]
    try:
        cov_log = np.linalg.inv(Jac.T @ Jac)
    except np.linalg.LinAlgError:
        return np.full((len(free), len(free)), np.nan)
    scale = theta[free]
    return cov_log * np.outer(scale, scale)


def jacobian_at(data: SweepDataset, report: FitReport, h: float) -> np.ndarray:
    """Central-difference Jacobian of the weighted residuals at the best fit."""
    b = report.best
    theta = np.array([b.B_max, b.g_nv, b.kappa_rec, report.J_S0])
    free = np.array([NAMES.index(k) for k in report.cov_names])
    problem = _Problem(data, np.array([b.exponents], dtype=float), free, theta, h)
    x = np.log(theta[free])[None, :]
    _, Jm = problem.residuals(x, np.array([0]))
    return problem.jacobian(x, np.array([0]), Jm)[0]
