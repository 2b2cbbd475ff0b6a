"""Two-parameter (time, age) densities derived from an elapsed-time trajectory.

The service density b(t, x), the potential-queue density q~(t, x) and the
queue density q(t, x) are read off nu_t and eta_t cell by cell. The
evolution, boundary and balance clauses of the two-parameter model are then
checked on the grid, and a two-parameter initial state can be turned back
into measure-valued initial data and re-solved.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arrivals import ArrivalRate
from .distributions import Distribution
from .elapsed import InitialCondition, SolverParams, Trajectory, solve, validate_initial
from .errors import ConfigError, UnsupportedModelError
from .measures import GridMeasure


@dataclass
class TwoParamSlice:
    t: float
    dx: float
    b: np.ndarray        # cell averages of b(t, .)
    q_tilde: np.ndarray  # cell averages of q~(t, .)
    q: np.ndarray        # cell averages of q(t, .)
    w: float             # queue boundary, equal to the frontier chi(t)
    sigma: float         # total service rate
    alpha: float         # total abandonment rate
    b_at_0: float        # entry rate into service
    q_tilde_at_0: float  # arrival rate
    q_at_0: float
    q_at_w: float        # single-point value at y = w; carries no mass

    @property
    def edges(self) -> np.ndarray:
        return np.arange(max(self.b.size, self.q_tilde.size) + 1) * self.dx

    def B_cum(self, y) -> np.ndarray:
        return _cum(self.b, self.dx, y)

    def Qt_cum(self, y) -> np.ndarray:
        return _cum(self.q_tilde, self.dx, y)

    def Q_cum(self, y) -> np.ndarray:
        return _cum(self.q, self.dx, y)


def _cum(dens, dx, y):
    c = np.concatenate([[0.0], np.cumsum(dens * dx)])
    return np.interp(y, np.arange(c.size) * dx, c)


def _require_densities(Gs: Distribution, Gr: Distribution) -> None:
    if not (Gs.has_density and Gr.has_density):
        raise UnsupportedModelError("two-parameter densities need service and patience laws with densities")


def _hazard_mid(law: Distribution, n: int, dx: float) -> np.ndarray:
    mid = (np.arange(n) + 0.5) * dx
    out = np.zeros(n)
    ok = mid < law.H
    out[ok] = law.hazard(mid[ok])
    return out


def slice_from_trajectory(traj: Trajectory, t: float) -> TwoParamSlice:
    _require_densities(traj.Gs, traj.Gr)
    if traj.nu_atoms:
        raise UnsupportedModelError("initial service measure has atoms; b(0, .) does not exist")
    j = traj.index(t)
    dx = traj.dt
    b = traj.nu_cells(j) / dx
    qt = traj.eta_cells(j) / dx
    chi = float(traj.chi[j])
    frac = np.clip(chi / dx - np.arange(qt.size), 0.0, 1.0)
    q = qt * frac
    sigma = float(np.sum(b * dx * _hazard_mid(traj.Gs, b.size, dx)))
    alpha = float(np.sum(q * dx * _hazard_mid(traj.Gr, q.size, dx)))
    lam = float(traj.rate(t))
    kappa = float(traj.kappa[j])
    Bt = float(traj.B[j])
    full = traj.regime[j] >= 1
    if chi > 0:
        q0 = lam
    elif full:
        q0 = lam - min(lam, sigma)
    else:
        q0 = 0.0
    q_w = lam - min(lam, sigma) if Bt >= 1.0 - traj.params.regime_band else 0.0
    return TwoParamSlice(float(t), dx, b, qt, q, chi, sigma, alpha, kappa, lam, q0, q_w)


def slices(traj: Trajectory, times) -> list[TwoParamSlice]:
    return [slice_from_trajectory(traj, t) for t in times]


@dataclass
class WhittReport:
    residuals: dict = field(default_factory=dict)
    samples: int = 0

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values()) if self.residuals else 0.0

    def to_json(self) -> str:
        return json.dumps({"residuals": self.residuals, "samples": self.samples}, indent=2, sort_keys=True)


def check_whitt(traj: Trajectory, n_times: int = 12, lags=(1, 10, 100), guard: int = 5,
                ages=None) -> WhittReport:
    """Evaluate the two-parameter clauses on the trajectory's grid.

    Evolution clauses compare b (resp. q~) at (t + u, x + u) with the survival
    ratio at cell midpoints. Boundary clauses compare the age-0 cell density
    with the rate prescribed by the current regime; grid times within
    ``guard`` steps of a regime switch are skipped since the entry rate is
    only defined almost everywhere.
    """
    _require_densities(traj.Gs, traj.Gr)
    dt, J = traj.dt, traj.filled
    Gs, Gr = traj.Gs, traj.Gr
    max_lag = max(lags)
    js = np.unique(np.linspace(guard + 1, J - max_lag, n_times).astype(int))
    res = {k: 0.0 for k in ("w2", "w3", "w5", "w7", "w8", "w9", "w10")}
    count = 0

    switch = np.nonzero(np.diff(traj.regime[: J + 1]))[0] + 1
    near = np.zeros(J + 1, dtype=bool)
    for s in switch:
        near[max(s - guard, 0): s + guard + 1] = True

    for j in js:
        t = j * dt
        sl = slice_from_trajectory(traj, t)
        n_b, n_q = sl.b.size, sl.q_tilde.size
        cells = np.arange(0, min(n_b, n_q), max(1, min(n_b, n_q) // 40)) if ages is None else \
            (np.asarray(ages) / dt).astype(int)
        for k in lags:
            later = slice_from_trajectory(traj, (j + k) * dt)
            u = k * dt
            for i in cells:
                x = (i + 0.5) * dt
                if i + k < later.b.size and i < n_b and x < Gs.H:
                    pred = sl.b[i] * float(Gs.ccdf(x + u)) / float(Gs.ccdf(x))
                    res["w2"] = max(res["w2"], abs(later.b[i + k] - pred))
                if i + k < later.q_tilde.size and i < n_q and x < Gr.H:
                    pred = sl.q_tilde[i] * float(Gr.ccdf(x + u)) / float(Gr.ccdf(x))
                    res["w3"] = max(res["w3"], abs(later.q_tilde[i + k] - pred))
                count += 1
        # (w5): q equals q~ strictly below the boundary and vanishes beyond it
        below = np.arange(n_q) < math.floor(sl.w / dt)
        above = np.arange(n_q) >= math.ceil(sl.w / dt)
        res["w5"] = max(res["w5"], float(np.max(np.abs(sl.q[below] - sl.q_tilde[below]), initial=0.0)),
                        float(np.max(np.abs(sl.q[above]), initial=0.0)))
        # (w9): entry rate of the potential queue
        res["w9"] = max(res["w9"], abs(sl.q_tilde[0] - sl.q_tilde_at_0))
        if near[j]:
            continue
        lam, sig = sl.q_tilde_at_0, sl.sigma
        regime = traj.regime[j]
        if regime == 0:
            want_b, want_q = lam, 0.0
        elif regime == 1 and traj.Q[j] <= traj.params.regime_band:
            want_b, want_q = min(sig, lam), lam - min(sig, lam)
        else:
            want_b, want_q = sig, lam
        # b(t, 0) is the entry rate itself; compare the age-0 cell average with it
        res["w7"] = max(res["w7"], abs(sl.b[0] - want_b))
        res["w8"] = max(res["w8"], abs(sl.q[0] - want_q))

    # (w10): arrivals plus initial queue equal queue plus entries plus abandonments
    alpha = traj.abandonment_rate()
    int_alpha = np.concatenate([[0.0], np.cumsum(0.5 * dt * (alpha[1:] + alpha[:-1]))])
    entries = np.concatenate([[0.0], np.cumsum(traj.kappa[1: J + 1] * dt)])
    lhs = traj.E[: J + 1] + traj.Q[0]
    rhs = traj.Q[: J + 1] + entries + int_alpha
    res["w10"] = float(np.max(np.abs(lhs - rhs)))
    return WhittReport({k: float(v) for k, v in res.items()}, count)


def entry_cumulative(traj: Trajectory) -> np.ndarray:
    """int_0^t b(s, 0) ds with b(., 0) piecewise constant over steps."""
    J = traj.filled
    return np.concatenate([[0.0], np.cumsum(traj.kappa[1: J + 1] * traj.dt)])


def rate_derivative_gap(traj: Trajectory, every: int = 50) -> tuple[float, float]:
    """max |sigma - D'| and |alpha - R'| using central differences of D and R."""
    _require_densities(traj.Gs, traj.Gr)
    dt, J = traj.dt, traj.filled
    js = np.arange(1, J, every)
    gs, ga = 0.0, 0.0
    near = set()
    for s in np.nonzero(np.diff(traj.regime[: J + 1]))[0] + 1:
        near.update(range(s - 3, s + 4))
    for j in js:
        if j in near:
            continue
        sl = slice_from_trajectory(traj, j * dt)
        dD = (traj.D[j + 1] - traj.D[j - 1]) / (2 * dt)
        dR = (traj.R[j + 1] - traj.R[j - 1]) / (2 * dt)
        gs = max(gs, abs(sl.sigma - dD))
        ga = max(ga, abs(sl.alpha - dR))
    return gs, ga


def initial_from_densities(b0, q0, dx: float, Gs: Distribution, Gr: Distribution) -> InitialCondition:
    """Measures with densities b(0, .) and q(0, .) (cell averages on a dx grid)."""
    b0 = np.atleast_1d(np.asarray(b0, dtype=float))
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    nb, nq = max(b0.size, 1), max(q0.size, 1)
    nu = GridMeasure(np.arange(nb + 1) * dx, b0 if b0.size else np.zeros(1), H_cap=Gs.H)
    eta = GridMeasure(np.arange(nq + 1) * dx, q0 if q0.size else np.zeros(1), H_cap=Gr.H)
    X0 = nu.total_mass + eta.total_mass
    ic = InitialCondition(eta, nu, X0)
    rep = validate_initial(ic)
    if not rep.ok:
        raise ConfigError(f"two-parameter initial data violate admissibility: {rep.violations}")
    return ic


def measures_from_two_param(b0, q0, rate: ArrivalRate, Gs: Distribution, Gr: Distribution,
                            T: float, dt: float = 1e-3) -> Trajectory:
    """Identify eta_0 = q(0, x) dx, nu_0 = b(0, x) dx and solve the measure-valued model."""
    ic = initial_from_densities(b0, q0, dt, Gs, Gr)
    return solve(rate, Gs, Gr, ic, SolverParams(dt=dt, T=T))


@dataclass(frozen=True)
class ShiftedRate:
    """lambda(t0 + .), used to restart a model from a slice taken at t0."""

    base: ArrivalRate
    t0: float

    def __call__(self, t):
        return self.base(np.asarray(t) + self.t0)

    def cumulative(self, t):
        return self.base.cumulative(np.asarray(t) + self.t0) - self.base.cumulative(self.t0)


def restart_from_slice(traj: Trajectory, t0: float, T: float | None = None) -> Trajectory:
    """Re-solve from the two-parameter state at t0 and return the restarted trajectory."""
    sl = slice_from_trajectory(traj, t0)
    horizon = (traj.filled * traj.dt - t0) if T is None else T
    return measures_from_two_param(sl.b, sl.q, ShiftedRate(traj.rate, t0), traj.Gs, traj.Gr,
                                   horizon, traj.dt)


def export_heatmap(traj: Trajectory, times, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "b", "q_tilde", "q"])
        for t in times:
            sl = slice_from_trajectory(traj, t)
            n = max(sl.b.size, sl.q_tilde.size)
            b = np.pad(sl.b, (0, n - sl.b.size))
            qt = np.pad(sl.q_tilde, (0, n - sl.q_tilde.size))
            q = np.pad(sl.q, (0, n - sl.q.size))
            for i in range(n):
                w.writerow([f"{t:.12g}", f"{(i + 0.5) * sl.dx:.12g}", f"{b[i]:.12g}",
                            f"{qt[i]:.12g}", f"{q[i]:.12g}"])
