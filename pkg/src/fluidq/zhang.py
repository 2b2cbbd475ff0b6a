"""Residual-time fluid model with a virtual queue, and conversions to and from
the elapsed-time model.

The virtual queue holds content from arrival until its turn for service,
whether or not its patience has run out. With a constant arrival rate lam the
queue content is determined by the virtual-queue mass Qv through

    Q(t) = lam * Gr_d(Qv(t) / lam),     Gr_d(x) = int_0^x (1 - Gr(s)) ds,

abandonment runs at lam * Gr(Qv / lam), and entries into service are
K(t) = int_0^t (1 - Gr(Qv(s) / lam)) dLv(s) with Lv(t) = lam t - Qv(t).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize

from .arrivals import ArrivalRate
from .distributions import Distribution, Exponential
from .elapsed import InitialCondition, SolverParams, Trajectory, solve
from .errors import ConfigError, StepFailureError, UnsupportedModelError
from .measures import GridMeasure
from .residual import _initial_layer, _scattered_sum

PROBE_X = (0.0, 0.25, 0.5, 1.0, 2.0)
CON2_TOL = 1e-6
ZHANG_COLUMNS = ("t", "Qv", "Lv", "B", "Q", "X", "K", "R")


def _constant_rate(lam) -> float:
    if isinstance(lam, ArrivalRate):
        if not lam.is_constant:
            raise ConfigError("the virtual-queue model needs a constant arrival rate")
        lam = lam.value if lam.kind == "constant" else lam.values[0]
    lam = float(lam)
    if not lam > 0:
        raise ConfigError("arrival rate must be positive")
    return lam


def _gd_ext(Gr: Distribution, x) -> np.ndarray:
    """Gr_d extended to negative arguments, where the survival function is 1."""
    x = np.asarray(x, dtype=float)
    return np.where(x < 0, x, np.asarray(Gr.integrated_ccdf(np.maximum(x, 0.0))))


def con2_tail(nu0: GridMeasure, Gs: Distribution) -> Callable:
    """x -> int Gs_bar(y + x) / Gs_bar(y) nu0(dy), the residual tail of initial service content."""
    w, y = _initial_layer(nu0, Gs, math.inf)

    def tail(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return _scattered_sum(w, y, Gs.ccdf, x)

    return tail


def con4_eta0(lam: float, Gr: Distribution, a: float, dt: float) -> GridMeasure:
    """lam 1_[0, a](x) Gr_bar(x) dx on the dt grid (cell masses exact)."""
    edges = GridMeasure.uniform_grid(dt, max(a, dt))
    hi = np.minimum(edges[1:], a)
    lo = np.minimum(edges[:-1], a)
    cells = lam * (np.asarray(Gr.integrated_ccdf(hi)) - np.asarray(Gr.integrated_ccdf(lo)))
    return GridMeasure.from_cell_masses(edges, cells, H_cap=Gr.H)


@dataclass(frozen=True)
class ZhangInitial:
    """Initial virtual-queue mass and residual-service tail Z0(x) = Z_0((x, inf)).

    ``nu0`` optionally records an elapsed-time witness for Z0.
    """

    Qv0: float
    Z0: Callable
    nu0: GridMeasure | None = None

    @classmethod
    def from_nu0(cls, nu0: GridMeasure, Gs: Distribution, Qv0: float = 0.0) -> "ZhangInitial":
        return cls(float(Qv0), con2_tail(nu0, Gs), nu0)

    @classmethod
    def empty(cls) -> "ZhangInitial":
        return cls(0.0, lambda x: np.zeros(np.atleast_1d(x).shape))

    @property
    def B0(self) -> float:
        return float(np.atleast_1d(self.Z0(0.0))[0])

    def Q0(self, lam: float, Gr: Distribution) -> float:
        return lam * float(Gr.integrated_ccdf(self.Qv0 / lam))

    def R0_tail(self, lam: float, Gr: Distribution, x) -> np.ndarray:
        """lam int_0^{Qv0/lam} Gr_bar(x + s) ds."""
        x = np.asarray(x, dtype=float)
        return lam * (_gd_ext(Gr, x + self.Qv0 / lam) - _gd_ext(Gr, x))


@dataclass
class ZhangState:
    t: float
    Qv: float
    Lv: float
    B: float
    Q: float
    X: float
    R_meas: Callable   # x -> R_t((x, inf)), x real
    Z_meas: Callable   # x -> Z_t((x, inf)), x >= 0


class ZhangTrajectory:
    def __init__(self, lam, Gs, Gr, init, dt, columns, regime=None):
        self.lam, self.Gs, self.Gr, self.init, self.dt = lam, Gs, Gr, init, dt
        for c in ZHANG_COLUMNS:
            setattr(self, c, np.asarray(columns[c], dtype=float))
        self.D = self.B[0] + self.K - self.B
        self.regime = regime if regime is not None else np.where(self.X > 1, 2, 0).astype(np.int8)

    @property
    def dK(self) -> np.ndarray:
        return np.concatenate([[0.0], np.diff(self.K)])

    def columns(self) -> dict[str, np.ndarray]:
        return {c: getattr(self, c) for c in ZHANG_COLUMNS}

    def index(self, t: float) -> int:
        j = int(round(t / self.dt))
        if j < 0 or j >= self.t.size or abs(j * self.dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"time {t} is not a grid time")
        return j

    def R_tail(self, j: int, x) -> np.ndarray:
        """lam int_{t - Qv/lam}^t Gr_bar(t + x - s) ds."""
        x = np.asarray(x, dtype=float)
        return self.lam * (_gd_ext(self.Gr, x + self.Qv[j] / self.lam) - _gd_ext(self.Gr, x))

    def Z_tail(self, j: int, x) -> np.ndarray:
        """Z0 shifted by t plus entries, each at the midpoint of its step."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        t = self.t[j]
        ages = t - (np.arange(1, j + 1) - 0.5) * self.dt
        out = np.asarray(self.init.Z0(x + t), dtype=float)
        return out + _scattered_sum(self.dK[1:j + 1], ages, self.Gs.ccdf, x)

    def state(self, j: int) -> ZhangState:
        return ZhangState(self.t[j], self.Qv[j], self.Lv[j], self.B[j], self.Q[j], self.X[j],
                          lambda x, j=j: self.R_tail(j, x), lambda x, j=j: self.Z_tail(j, x))

    # -- invariants --
    def balance_residual(self) -> float:
        return float(np.max(np.abs(self.Q + self.K + self.R - self.Q[0] - self.lam * self.t)))

    def qqv_residual(self) -> float:
        q = self.lam * np.asarray(self.Gr.integrated_ccdf(self.Qv / self.lam))
        return float(np.max(np.abs(self.Q - q)))

    def entry_representation(self) -> np.ndarray:
        """int_0^t Gr_bar(Qv/lam) dLv by the trapezoid rule, to compare with K."""
        sf = np.asarray(self.Gr.ccdf(self.Qv / self.lam))
        inc = 0.5 * (sf[1:] + sf[:-1]) * np.diff(self.Lv)
        return np.concatenate([[0.0], np.cumsum(inc)])

    def to_csv(self, path: str | Path) -> None:
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ZHANG_COLUMNS)
            for row in zip(*(cols[c] for c in ZHANG_COLUMNS)):
                w.writerow([f"{v:.12g}" for v in row])


def _check_zhang_laws(Gs: Distribution, Gr: Distribution) -> None:
    if not Gs.is_continuous:
        raise ConfigError("the virtual-queue model needs a continuous service law")
    if not Gr.is_lipschitz:
        raise ConfigError("the virtual-queue model needs a Lipschitz patience law")


def solve_zhang(lam, Gs: Distribution, Gr: Distribution, init: ZhangInitial,
                params: SolverParams = SolverParams()) -> ZhangTrajectory:
    """March the virtual-queue model on the grid t_j = j dt.

    Each step first asks whether everything queued plus the new arrivals fits
    into the free capacity. If so the virtual queue empties. Otherwise the
    servers stay full, the entry increment is fixed by that, and Qv solves the
    queue balance Q_j = Q_{j-1} + lam dt - dK - dR with dR from the trapezoid
    rule in Gr(Qv / lam).
    """
    lam = _constant_rate(lam)
    _check_zhang_laws(Gs, Gr)
    dt, J = params.dt, params.n_steps
    t = np.arange(J + 1) * dt
    B0 = init.B0
    Q0 = init.Q0(lam, Gr)
    if init.Qv0 < 0 or B0 < -1e-12 or B0 > 1 + 1e-9:
        raise ConfigError("initial virtual queue must be nonnegative and B0 in [0, 1]")
    if Q0 > 1e-12 and B0 < 1 - 1e-9:
        raise ConfigError("initial state idles servers while content is queued")
    if init.Qv0 / lam >= Gr.H:
        raise ConfigError("initial virtual-queue length reaches beyond the patience support")

    z0_t = np.asarray(init.Z0(t), dtype=float)
    avg_gs = np.diff(np.asarray(Gs.integrated_ccdf(np.arange(J + 2) * dt))) / dt
    c0 = avg_gs[0]
    gd = lambda v: float(Gr._gd(np.asarray(v / lam)))
    gcdf = lambda v: 1.0 - float(Gr._sf(np.asarray(v / lam)))
    v_cap = lam * Gr.age_horizon()

    Qv, Q, K, R, B, dK = (np.zeros(J + 1) for _ in range(6))
    Qv[0], Q[0], B[0] = init.Qv0, Q0, B0
    for j in range(1, J + 1):
        b_old = z0_t[j] + float(np.dot(dK[j - 1:0:-1], avg_gs[1:j]))
        cap = max((1.0 - b_old) / c0, 0.0)
        g_prev = gcdf(Qv[j - 1])
        avail = lambda v: Q[j - 1] + lam * dt - 0.5 * lam * dt * (g_prev + gcdf(v))
        if avail(0.0) <= cap:
            v, dk = 0.0, avail(0.0)
        else:
            dk = cap
            f = lambda v: lam * gd(v) - avail(v) + dk
            hi = Qv[j - 1] + lam * dt
            while f(hi) < 0 and hi < v_cap:
                hi = min(2.0 * hi + lam * dt, v_cap)
            if f(hi) < 0:
                raise StepFailureError(f"virtual-queue balance has no root at t = {t[j]:g}",
                                       {"step": j, "Qv_prev": float(Qv[j - 1])})
            guess = min(max(2.0 * Qv[j - 1] - Qv[j - 2], 0.0), hi) if j > 1 else Qv[0]
            v = _root(f, guess, hi)
        Qv[j] = v
        Q[j] = lam * gd(v)
        dK[j] = dk
        K[j] = K[j - 1] + dk
        R[j] = R[j - 1] + 0.5 * lam * dt * (g_prev + gcdf(v))
        B[j] = b_old + c0 * dk
    X = B + Q
    band = params.regime_band
    regime = np.where(np.abs(X - 1.0) <= band, 1, np.where(X > 1.0, 2, 0)).astype(np.int8)
    cols = dict(t=t, Qv=Qv, Lv=lam * t - Qv, B=B, Q=Q, X=X, K=K, R=R)
    return ZhangTrajectory(lam, Gs, Gr, init, dt, cols, regime)


def _root(f, guess: float, hi: float) -> float:
    """Root of an increasing f on [0, hi]: secant from ``guess``, bisection-safe fallback."""
    x0, f0 = guess, f(guess)
    if f0 == 0.0:
        return x0
    x1 = guess + (1e-7 * (1.0 + abs(guess)) if f0 < 0 else -1e-7 * (1.0 + abs(guess)))
    x1 = min(max(x1, 0.0), hi)
    f1 = f(x1)
    for _ in range(30):
        if f1 == f0:
            break
        x2 = x1 - f1 * (x1 - x0) / (f1 - f0)
        if not 0.0 <= x2 <= hi:
            break
        x0, f0, x1 = x1, f1, x2
        f1 = f(x1)
        if abs(x1 - x0) <= 1e-15 * (1.0 + x1) or abs(f1) <= 1e-15:
            return x1
    return optimize.brentq(f, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)


# -- Zhang -> elapsed --

@dataclass
class Con2Fit:
    nu0: GridMeasure | None
    residual: float
    method: str


def _exp_rate(Gs: Distribution) -> float | None:
    return Gs.rate if isinstance(Gs, Exponential) else None


def fit_nu0(Z0: Callable, Gs: Distribution, dt: float, x_max: float | None = None,
            tol: float = CON2_TOL, n_cells: int = 120) -> Con2Fit:
    """Find an initial elapsed-service measure whose residual tail is Z0.

    Exponential service: only the mass matters, so the witness is the total
    mass spread over the first cell, provided Z0 has an exponential tail.
    Otherwise: nonnegative least squares over piecewise-constant densities on
    a coarse age grid. ``residual`` is the max tail mismatch on a probe grid.
    """
    horizon = min(Gs.age_horizon(), Gs.H)
    x_max = x_max if x_max is not None else min(horizon, 10.0 * Gs.mean)
    xs = np.linspace(0.0, x_max, 201)
    target = np.asarray(Z0(xs), dtype=float)
    c = float(target[0])
    mu = _exp_rate(Gs)
    if mu is not None:
        residual = float(np.max(np.abs(target - c * np.exp(-mu * xs))))
        if residual > tol:
            return Con2Fit(None, residual, "exponential")
        edges = GridMeasure.uniform_grid(dt, dt)
        return Con2Fit(GridMeasure.from_cell_masses(edges, [c], H_cap=Gs.H), residual, "exponential")

    a_max = min(horizon, 10.0 * Gs.mean) * (1 - 1e-9)
    h = a_max / n_cells
    h = max(dt, round(h / dt) * dt)
    n = int(a_max / h)
    nodes, weights = np.polynomial.legendre.leggauss(8)
    A = np.zeros((xs.size, n))
    for k in range(n):
        y = k * h + 0.5 * h * (nodes + 1.0)
        sf_y = np.asarray(Gs.ccdf(y))
        ratio = np.asarray(Gs.ccdf(y[None, :] + xs[:, None])) / sf_y[None, :]
        A[:, k] = ratio @ (0.5 * weights)  # average over the cell
    masses, _ = optimize.nnls(A, target, maxiter=50 * n)
    residual = float(np.max(np.abs(A @ masses - target)))
    if residual > tol:
        return Con2Fit(None, residual, "nnls")
    coarse = np.arange(n + 1) * h
    fine = GridMeasure.uniform_grid(dt, coarse[-1])
    nu0 = GridMeasure.from_cell_masses(coarse, masses, H_cap=Gs.H).rebin(fine)
    return Con2Fit(nu0, residual, "nnls")


@dataclass
class EquivalenceReport:
    feasible: bool
    reason: str
    deviations: dict = field(default_factory=dict)
    qv_chi: float = math.nan
    eta0: GridMeasure | None = None
    nu0: GridMeasure | None = None
    trajectory: Trajectory | None = None
    con2_residual: float = math.nan

    def passed(self, tol: float) -> bool:
        return self.feasible and all(v <= tol for v in self.deviations.values())

    def to_json(self) -> dict:
        return {"feasible": self.feasible, "reason": self.reason, "deviations": self.deviations,
                "qv_chi": None if math.isnan(self.qv_chi) else self.qv_chi,
                "con2_residual": None if math.isnan(self.con2_residual) else self.con2_residual}


def zuniga_from_zhang(zt: ZhangTrajectory, nu0: GridMeasure | None = None,
                      params: SolverParams | None = None) -> EquivalenceReport:
    """Build elapsed-time inputs from a virtual-queue trajectory, solve, and compare."""
    lam, Gs, Gr, init, dt = zt.lam, zt.Gs, zt.Gr, zt.init, zt.dt
    nu0 = nu0 if nu0 is not None else init.nu0
    if nu0 is not None:
        xs = np.linspace(0.0, min(Gs.age_horizon(), Gs.H, 10.0 * Gs.mean) * (1 - 1e-9), 201)
        res = float(np.max(np.abs(np.asarray(init.Z0(xs)) - con2_tail(nu0, Gs)(xs))))
        fit = Con2Fit(nu0 if res <= CON2_TOL else None, res, "supplied")
    else:
        fit = fit_nu0(init.Z0, Gs, dt)
    if fit.nu0 is None:
        return EquivalenceReport(False, f"no initial service measure reproduces Z0 ({fit.method}, "
                                        f"residual {fit.residual:.3g})", con2_residual=fit.residual)
    a = init.Qv0 / lam
    eta0 = con4_eta0(lam, Gr, a, dt) if a > 0 else InitialCondition.empty(dt).eta0
    X0 = float(zt.B[0] + zt.Q[0])
    ic = InitialCondition(eta0, fit.nu0, X0)
    p = params or SolverParams(dt=dt, T=zt.t[-1])
    traj = solve(ArrivalRate.constant(lam), Gs, Gr, ic, p)
    n = min(traj.filled + 1, zt.t.size)
    dev = {c: float(np.max(np.abs(getattr(traj, c)[:n] - getattr(zt, c)[:n]))) for c in ("Q", "B", "X", "K", "R")}
    qv_chi = float(np.max(np.abs(zt.Qv[:n] / lam - np.minimum(traj.chi[:n], traj.t[:n] + a))))
    return EquivalenceReport(True, "ok", dev, qv_chi, eta0, fit.nu0, traj, fit.residual)


# -- elapsed -> Zhang --

def _layer_pieces(eta0: GridMeasure, upper: float):
    """Densities and clipped cells [lo, hi] of eta0 below ``upper``, with piece midpoints."""
    lo, hi = eta0.edges[:-1], np.minimum(eta0.edges[1:], upper)
    keep = (hi > lo) & (eta0.density > 0)
    lo, hi = lo[keep], hi[keep]
    return eta0.density[keep] * (hi - lo), 0.5 * (lo + hi)


def _initial_rhs(eta0: GridMeasure, Gr: Distribution, t: float, chi: float, x: np.ndarray, f) -> np.ndarray:
    """sum over initial queue below chi - t of f(y + t + x) / Gr_bar(y) eta0(dy)."""
    if chi < t or eta0.total_mass == 0:
        return np.zeros(x.size)
    m, y = _layer_pieces(eta0, chi - t)
    if m.size == 0:
        return np.zeros(x.size)
    w = m / np.asarray(Gr.ccdf(y))
    return _scattered_sum(w, y + t, f, x)


@dataclass
class ZhangFromZuniga:
    feasible: bool
    z: np.ndarray                  # z_t on the checked grid (nan where no common value)
    spread: np.ndarray
    certificate: dict | None = None
    trajectory: ZhangTrajectory | None = None
    r_identity: float = math.nan

    def certificate_json(self) -> str:
        return json.dumps(self.certificate, indent=2)


def _probe_set(Gr: Distribution, probe_x) -> np.ndarray:
    xs = np.asarray([x for x in probe_x if x < Gr.H], dtype=float)
    if xs.size == 0:
        raise ConfigError("no probe point lies inside the patience support")
    return xs


def _solve_z(Gr: Distribution, lam: float, c: float, x: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """z with lam int_c^z Gr_bar(x + s) ds = rhs, per x; nan when no z exists."""
    level = np.asarray(Gr.integrated_ccdf(x + c)) + rhs / lam
    out = np.full(x.size, np.nan)
    ok = level < Gr.mean
    if np.any(ok):
        out[ok] = np.asarray(Gr.inverse_integrated_ccdf(np.maximum(level[ok], 0.0))) - x[ok]
    return out


def zhang_from_zuniga(traj: Trajectory, probe_x=PROBE_X, tol: float | None = None,
                      r_tol: float = 1e-3) -> ZhangFromZuniga:
    """Look for a common z_t across probe points at every grid time; emit the Zhang
    trajectory Qv = lam z_t if one exists, otherwise a certificate for the first failure.
    """
    lam = _constant_rate(traj.rate)
    Gr, eta0 = traj.Gr, traj.ic.eta0
    xs = _probe_set(Gr, probe_x)
    tol = tol if tol is not None else 1e-6 * (1.0 + lam)
    n = traj.filled + 1
    t, chi = traj.t[:n], traj.chi[:n]
    z = np.minimum(chi, t).copy()
    spread = np.zeros(n)
    fail = None
    for j in np.nonzero(chi >= t)[0] if eta0.total_mass > 0 else []:
        rhs = _initial_rhs(eta0, Gr, t[j], chi[j], xs, Gr.ccdf)
        zx = _solve_z(Gr, lam, t[j], xs, rhs)
        finite = zx[np.isfinite(zx)]
        s = float(np.ptp(finite)) if finite.size > 1 else 0.0
        spread[j] = s if finite.size == xs.size else math.inf
        z[j] = float(np.mean(finite)) if finite.size else math.nan
        if fail is None and spread[j] > tol:
            fail = {"t_fail": float(t[j]), "probe_x": xs.tolist(),
                    "z_values": [None if not np.isfinite(v) else float(v) for v in zx],
                    "spread": s, "unsolvable": int(xs.size - finite.size), "tolerance": tol}
    if fail is not None:
        return ZhangFromZuniga(False, z, spread, {"reason": "z depends on x", **fail})

    gz = np.asarray(Gr.cdf(z))
    r_z = lam * np.concatenate([[0.0], np.cumsum(0.5 * traj.dt * (gz[1:] + gz[:-1]))])
    r_id = float(np.max(np.abs(r_z - traj.R[:n])))
    if r_id > r_tol:
        j = int(np.argmax(np.abs(r_z - traj.R[:n]) > r_tol))
        cert = {"reason": "abandonment identity fails", "t_fail": float(t[j]), "probe_x": xs.tolist(),
                "z_values": [float(z[j])] * xs.size, "spread": 0.0, "r_gap": r_id, "tolerance": r_tol}
        return ZhangFromZuniga(False, z, spread, cert, r_identity=r_id)

    Qv = lam * z
    init = ZhangInitial.from_nu0(traj.ic.nu0, traj.Gs, Qv[0])
    cols = dict(t=t, Qv=Qv, Lv=lam * t - Qv, B=traj.B[:n], Q=traj.Q[:n], X=traj.X[:n],
                K=traj.K[:n], R=traj.R[:n])
    zt = ZhangTrajectory(lam, traj.Gs, Gr, init, traj.dt, cols, traj.regime[:n].copy())
    return ZhangFromZuniga(True, z, spread, None, zt, r_id)


def check_density_condition(eta0: GridMeasure, Gr: Distribution, lam, traj: Trajectory,
                            ts=None, probe_x=PROBE_X, tol: float | None = None) -> dict:
    """Density form of the common-z condition: lam Gr(x + z) = lam Gr(x + t ^ chi) +
    initial-queue term with the patience density, solved for z at each probe x.
    """
    if not Gr.has_density:
        raise UnsupportedModelError("the density form needs a patience density")
    lam = _constant_rate(lam)
    xs = _probe_set(Gr, probe_x)
    tol = tol if tol is not None else 1e-6 * (1.0 + lam)
    n = traj.filled + 1
    ts = traj.t[:n] if ts is None else np.asarray(ts, dtype=float)
    spreads, zs = [], []
    for t in ts:
        j = traj.index(t)
        chi = float(traj.chi[j])
        c = min(t, chi)
        rhs = _initial_rhs(eta0, Gr, t, chi, xs, Gr.density)
        level = np.asarray(Gr.cdf(xs + c)) + rhs / lam
        zx = np.full(xs.size, np.nan)
        ok = level < 1.0
        zx[ok] = np.asarray(Gr.ppf(np.clip(level[ok], 0.0, 1.0 - 1e-16))) - xs[ok]
        finite = zx[np.isfinite(zx)]
        spreads.append(float(np.ptp(finite)) if finite.size == xs.size else math.inf)
        zs.append(zx.tolist())
    spreads = np.asarray(spreads)
    worst = float(spreads.max()) if spreads.size else 0.0
    return {"feasible": bool(worst <= tol), "max_spread": worst, "tolerance": tol,
            "t": ts.tolist(), "spread": spreads.tolist(), "probe_x": xs.tolist()}
