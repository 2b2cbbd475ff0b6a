"""Forward solver for the measure-valued fluid model tracking elapsed times.

The potential-queue measure eta_t is explicit in the arrival history, and
the service measure nu_t, departures and abandonments are functionals of the
cumulative entry process K and the frontier waiting time chi. Each time step
therefore reduces to a scalar fixed point: guess chi(t+dt), compute the
abandonments it implies, get X from total mass balance, split X into B and Q
by non-idling, and re-read chi as the Q-quantile of eta_{t+dt}.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from . import _kernels as kern
from .arrivals import ArrivalRate
from .distributions import Distribution
from .errors import ConfigError, InvalidMeasureError, StepFailureError
from .measures import GridMeasure

BALANCE_TOL = 1e-6
S0_TOL = 1e-9


@dataclass(frozen=True)
class InitialCondition:
    eta0: GridMeasure
    nu0: GridMeasure
    X0: float

    @classmethod
    def empty(cls, step: float, upper: float = 1.0) -> "InitialCondition":
        edges = GridMeasure.uniform_grid(step, upper)
        return cls(GridMeasure.zero(edges), GridMeasure.zero(edges), 0.0)

    @property
    def B0(self) -> float:
        return self.nu0.total_mass

    @property
    def Q0(self) -> float:
        return max(self.X0 - 1.0, 0.0)


@dataclass
class ValidationReport:
    ok: bool
    violations: dict = field(default_factory=dict)

    def __bool__(self):
        return self.ok


def validate_initial(ic: InitialCondition, tol: float = S0_TOL) -> ValidationReport:
    """Check the two admissibility identities of an initial triple."""
    nu, eta, x = ic.nu0.total_mass, ic.eta0.total_mass, ic.X0
    bad = {}
    first = (1.0 - nu) - max(1.0 - x, 0.0)
    second = nu + eta - x
    if abs(first) > tol:
        bad["server_occupancy"] = first
    if abs(second) > tol:
        bad["total_content"] = second
    if x < 0:
        bad["negative_X0"] = x
    return ValidationReport(not bad, bad)


@dataclass(frozen=True)
class SolverParams:
    dt: float = 1e-3
    T: float = 30.0
    da: float | None = None
    max_iter: int = 50
    tol: float = 1e-10
    regime_band: float = 1e-8
    history_cutoff: float | None = None  # drop service history older than this (approximation)

    def __post_init__(self):
        if not (self.dt > 0 and self.T > 0):
            raise ConfigError("dt and T must be positive")
        if self.da is not None and not math.isclose(self.da, self.dt, rel_tol=1e-12):
            raise ConfigError("the age grid step must equal the time step")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


def check_regularity(Gs: Distribution, Gr: Distribution, ic: InitialCondition) -> None:
    if Gr.atoms:
        raise ConfigError("patience law must be continuous (no atoms)")
    if ic.eta0.has_atoms:
        raise ConfigError("initial queue measure must be diffuse")
    if Gs.atoms and ic.nu0.has_atoms:
        raise ConfigError("initial service measure must be diffuse when the service law has atoms")


def eta_at(ic: InitialCondition, rate: ArrivalRate, Gr: Distribution, t: float) -> GridMeasure:
    """Potential-queue measure at time t from the closed form (aged initial layer plus arrivals)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return ic.eta0
    aged = ic.eta0.age_and_thin(t, Gr)
    step = ic.eta0.edges[1] - ic.eta0.edges[0]
    upper = max(aged.edges[-1], min(t, Gr.age_horizon()))
    edges = GridMeasure.uniform_grid(step, upper)
    mid = 0.5 * (edges[:-1] + edges[1:])
    lo, hi = edges[:-1], np.minimum(edges[1:], t)
    inside = hi > lo
    # cell average of lambda(t - x) * survival(x), midpoint in the rate
    sf_int = np.asarray(Gr.integrated_ccdf(np.where(inside, hi, lo))) - np.asarray(Gr.integrated_ccdf(lo))
    mid_eff = np.where(inside, 0.5 * (lo + hi), mid)
    layer = np.where(inside, np.asarray(rate(np.maximum(t - mid_eff, 0.0))) * sf_int, 0.0)
    arrivals = GridMeasure.from_cell_masses(edges, layer, H_cap=Gr.H)
    return arrivals.plus(aged.rebin(edges) if aged.edges.size != edges.size else aged)


def _cells_on_grid(m: GridMeasure, dt: float) -> np.ndarray:
    """Cell masses of the diffuse part of ``m`` on the uniform dt grid."""
    n = max(int(math.ceil(m.edges[-1] / dt - 1e-9)), 1)
    edges = np.arange(n + 1) * dt
    uniform = m.edges.size == edges.size and np.allclose(m.edges, edges, rtol=0, atol=1e-12 * max(1.0, edges[-1]))
    cells = m.cell_masses.copy() if uniform else np.diff(np.interp(edges, m.edges, m._ac_cum))
    nz = np.nonzero(cells > 0)[0]
    return cells[: nz[-1] + 1] if nz.size else np.zeros(0)


@dataclass
class FluidState:
    t: float
    eta: GridMeasure
    nu: GridMeasure
    X: float
    B: float
    Q: float
    K: float
    D: float
    R: float
    chi: float
    kappa: float


COLUMNS = ("t", "X", "B", "Q", "K", "D", "R", "chi", "kappa")


class Trajectory:
    """Solution arrays on t_j = j dt plus what is needed to rebuild eta_t and nu_t."""

    def __init__(self, rate, Gs, Gr, ic, params, grids):
        self.rate: ArrivalRate = rate
        self.Gs: Distribution = Gs
        self.Gr: Distribution = Gr
        self.ic: InitialCondition = ic
        self.params: SolverParams = params
        self.dt = params.dt
        J = params.n_steps
        self.J = J
        self.t = np.arange(J + 1) * self.dt
        for name in ("X", "B", "Q", "K", "D", "R", "chi", "kappa"):
            setattr(self, name, np.zeros(J + 1))
        self.regime = np.zeros(J + 1, dtype=np.int8)
        self.iters = np.zeros(J + 1, dtype=np.int64)
        self.flags = np.zeros(J + 1, dtype=np.int8)
        self.E = grids["E"]
        self.dE = grids["dE"]
        self.src = grids["src"]
        self.n_eta = grids["n_eta"]
        self.avg_gr = grids["avg_gr"]
        self.srck = grids["srck"]
        self.n_nu = grids["n_nu"]
        self.avg_gs = grids["avg_gs"]
        self.n_gs = grids["n_gs"]
        self.b_atom = grids["b_atom"]
        self.nu_atoms = grids["nu_atoms"]
        self.filled = 0  # last index holding a valid state

    # -- lookup --
    def index(self, t: float) -> int:
        j = int(round(t / self.dt))
        if j < 0 or j > self.filled or abs(j * self.dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"time {t} is not a computed grid time")
        return j

    def columns(self) -> dict[str, np.ndarray]:
        n = self.filled + 1
        return {c: getattr(self, c)[:n] for c in COLUMNS}

    @property
    def dK(self) -> np.ndarray:
        """K-increment of step s at index s (index 0 unused)."""
        out = np.zeros(self.J + 1)
        out[1:] = self.srck[self.n_nu : self.n_nu + self.J]
        return out

    def eta_cells(self, j: int) -> np.ndarray:
        n = self.n_eta + j
        idx = self.n_eta + j - 1 - np.arange(n)
        return self.src[idx] * self.avg_gr[:n]

    def nu_cells(self, j: int) -> np.ndarray:
        n = self.n_nu + j
        idx = self.n_nu + j - 1 - np.arange(n)
        return self.srck[idx] * self.avg_gs[:n]

    def _measure(self, cells, atoms=(), cap=math.inf) -> GridMeasure:
        edges = np.arange(max(cells.size, 1) + 1) * self.dt
        if cells.size == 0:
            cells = np.zeros(1)
        locs = np.asarray([a for a, _ in atoms], dtype=float)
        masses = np.asarray([m for _, m in atoms], dtype=float)
        keep = locs < cap
        return GridMeasure(edges, np.maximum(cells, 0.0) / self.dt, locs[keep], masses[keep], cap)

    def eta(self, j: int) -> GridMeasure:
        return self._measure(self.eta_cells(j), cap=self.Gr.H)

    def nu(self, j: int) -> GridMeasure:
        t = j * self.dt
        atoms = []
        for y, m in self.nu_atoms:
            s0 = float(self.Gs.ccdf(y))
            w = m * float(self.Gs.ccdf(y + t)) / s0
            if w > 0:
                atoms.append((y + t, w))
        return self._measure(self.nu_cells(j), atoms, cap=self.Gs.H)

    def state(self, j: int) -> FluidState:
        return FluidState(self.t[j], self.eta(j), self.nu(j), self.X[j], self.B[j], self.Q[j],
                          self.K[j], self.D[j], self.R[j], self.chi[j], self.kappa[j])

    # -- invariants --
    def balance_residuals(self) -> dict[str, float]:
        n = self.filled + 1
        E, X, B, Q, K, D, R = (self.E[:n], self.X[:n], self.B[:n], self.Q[:n],
                               self.K[:n], self.D[:n], self.R[:n])
        X0, B0, Q0 = X[0], B[0], Q[0]
        return {
            "total": float(np.max(np.abs(E + X0 - X - R - D))),
            "queue": float(np.max(np.abs(E + Q0 - Q - K - R))),
            "server": float(np.max(np.abs(K - B - D + B0))),
            "non_idling": float(np.max(np.minimum(Q, 1.0 - B))),
            "k_monotone": float(np.min(np.diff(K))) if n > 1 else 0.0,
            "chi_lipschitz": float(np.max(_chi_excess(self.chi[:n], self.dt))) if n > 1 else 0.0,
        }

    def chi_consistency(self, js=None) -> float:
        """Worst violation of the two-sided frontier check at grid resolution."""
        worst = 0.0
        js = range(self.filled + 1) if js is None else js
        for j in js:
            m = self.eta(j)
            q = self.Q[j]
            upper = m.cumulative(self.chi[j])
            worst = max(worst, q - 1e-8 - upper)
            if self.chi[j] > 0:
                lower = m.cumulative(max(self.chi[j] - self.dt, 0.0))
                worst = max(worst, lower - q - 1e-8)
        return worst

    # -- dual computations --
    def service_rate(self) -> np.ndarray:
        """sigma(t_j): hazard-weighted service content (needs a service density)."""
        dt, J = self.dt, self.filled
        t = self.t[: J + 1]
        n = self.n_nu + J
        haz = _hazard_cells(self.Gs, n, dt)
        conv = fftconvolve(self.srck[:n], self.avg_gs[:n] * haz)
        sigma = conv[self.n_nu - 1: self.n_nu + J] if self.n_nu else np.concatenate([[0.0], conv[:J]])
        sigma = np.maximum(sigma, 0.0)
        for y, w in self.nu_atoms:
            sf = np.asarray(self.Gs.ccdf(y + t))
            live = (y + t) < self.Gs.H
            h = np.zeros_like(t)
            h[live] = self.Gs.hazard((y + t)[live])
            sigma = sigma + w * sf / float(self.Gs.ccdf(y)) * h
        return sigma

    def abandonment_rate(self) -> np.ndarray:
        """alpha(t_j): hazard-weighted queue content below the frontier (needs a patience density)."""
        J = self.filled
        haz = _hazard_cells(self.Gr, self.n_eta + J + 1, self.dt)
        return kern.hazard_below_frontier(J, self.src, self.n_eta, self.avg_gr, haz, self.chi[: J + 1], self.dt)

    def departure_process(self):
        """(D from the service-hazard integral or None, D from the convolution form)."""
        dt, J = self.dt, self.filled
        t = self.t[: J + 1]
        d0 = np.zeros(J + 1)
        edges0 = np.arange(self.n_nu + 1) * dt
        mid0 = 0.5 * (edges0[:-1] + edges0[1:])
        v = self.srck[: self.n_nu][::-1] * self.avg_gs[: self.n_nu]
        for y, w in list(zip(mid0, v)) + list(self.nu_atoms):
            if w <= 0:
                continue
            s0 = float(self.Gs.ccdf(y))
            d0 += w * (np.asarray(self.Gs.ccdf(y)) - np.asarray(self.Gs.ccdf(y + t))) / s0
        dK = self.dK[1 : J + 1]
        g_mid = np.asarray(self.Gs.cdf((np.arange(J) + 0.5) * dt))
        conv = fftconvolve(dK, g_mid)[:J] if J else np.zeros(0)
        mrd = d0.copy()
        mrd[1:] += conv
        if not self.Gs.has_density:
            return None, mrd
        sigma = self.service_rate()
        f80 = np.concatenate([[0.0], np.cumsum(0.5 * dt * (sigma[1:] + sigma[:-1]))])
        return f80, mrd

    def abandonment_process(self):
        """(R from the patience-hazard integral or None, R from the convolution form)."""
        dt, J = self.dt, self.filled
        chi = self.chi[: J + 1]
        t = self.t[: J + 1]
        n = self.n_eta + J + 2
        nodes = np.arange(n + 1) * dt
        gr_nodes = np.asarray(self.Gr.cdf(nodes))
        gr_half = np.asarray(self.Gr.cdf(nodes[:-1] + 0.5 * dt))
        lam_half = np.asarray(self.rate(np.maximum((np.arange(J + 1) - 0.5) * dt, 0.0)))
        cut = np.minimum(t, chi)
        gr_cut = np.asarray(self.Gr.cdf(cut))
        rate_new = kern.arrival_abandon_rate(J, lam_half, gr_nodes, gr_cut, cut, dt)
        w = self.src[: self.n_eta][::-1] * self.avg_gr[: self.n_eta]
        sf_mid0 = np.asarray(self.Gr.ccdf((np.arange(self.n_eta) + 0.5) * dt)) if self.n_eta else np.ones(0)
        sf_mid0 = np.where(sf_mid0 > 0, sf_mid0, 1.0)
        init = kern.initial_abandon(J, np.ascontiguousarray(w), sf_mid0, gr_half, chi, dt) if self.n_eta \
            else np.zeros(J + 1)
        mrq = init + np.concatenate([[0.0], np.cumsum(0.5 * dt * (rate_new[1:] + rate_new[:-1]))])
        if not self.Gr.has_density:
            return None, mrq
        a = self.abandonment_rate()
        f8 = np.concatenate([[0.0], np.cumsum(0.5 * dt * (a[1:] + a[:-1]))])
        return f8, mrq

    def occupation_density_check(self, samples, which: str = "service") -> float:
        """Max mismatch between the time-integrated measure and its closed-form density.

        ``which`` selects nu (density q_t, driven by K) or eta (density p_t,
        driven by E). Samples are (t, x) pairs; x is snapped to a cell midpoint.
        """
        dt = self.dt
        if which == "service":
            src, n0, avg, law, drive, atoms = self.srck, self.n_nu, self.avg_gs, self.Gs, self.K, self.nu_atoms
        else:
            src, n0, avg, law, drive, atoms = self.src, self.n_eta, self.avg_gr, self.Gr, self.E, []
        init = src[:n0][::-1] * avg[:n0]
        grid_t = self.t[: self.filled + 1]
        worst = 0.0
        for t, x in samples:
            j = self.index(t)
            i = int(x / dt)
            xm = (i + 0.5) * dt
            b = n0 + np.arange(j + 1) - 1 - i
            vals = np.where(b >= 0, src[np.maximum(b, 0)] * avg[i], 0.0) / dt
            numeric = float(np.sum(0.5 * dt * (vals[1:] + vals[:-1]))) if j else 0.0
            sf_x = float(law.ccdf_left(xm))
            closed = sf_x * float(np.interp(max(t - xm, 0.0), grid_t, drive[: grid_t.size]))
            lo = max(xm - t, 0.0)
            edges = np.arange(init.size + 1) * dt
            a = np.clip(edges[:-1], lo, xm)
            c = np.clip(edges[1:], lo, xm)
            live = (c > a) & (init > 0)
            if np.any(live):
                ymid = 0.5 * (a[live] + c[live])
                closed += float(np.sum(init[live] * (c[live] - a[live]) / dt * sf_x / np.asarray(law.ccdf(ymid))))
            for y, m in atoms:
                if lo <= y < xm:
                    closed += m * sf_x / float(law.ccdf(y))
            worst = max(worst, abs(numeric - closed))
        return worst

    # -- export --
    def to_csv(self, path: str | Path) -> None:
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for row in zip(*(cols[c] for c in COLUMNS)):
                w.writerow([f"{v:.12g}" for v in row])


def _hazard_cells(law: Distribution, n: int, dt: float) -> np.ndarray:
    mids = (np.arange(n) + 0.5) * dt
    haz = np.zeros(n)
    ok = mids < law.H
    haz[ok] = law.hazard(mids[ok])
    return haz


def _chi_excess(chi: np.ndarray, dt: float) -> np.ndarray:
    """max over i < j of chi_j - chi_i - (t_j - t_i), via a running minimum."""
    shifted = chi - np.arange(chi.size) * dt
    run_min = np.minimum.accumulate(shifted)
    return np.concatenate([[0.0], shifted[1:] - run_min[:-1]])


class ElapsedSolver:
    """Stateful stepper; ``run`` marches to T, ``step`` advances one dt."""

    def __init__(self, rate: ArrivalRate, Gs: Distribution, Gr: Distribution,
                 ic: InitialCondition, params: SolverParams = SolverParams()):
        report = validate_initial(ic)
        if not report.ok:
            raise ConfigError(f"initial condition is not admissible: {report.violations}")
        check_regularity(Gs, Gr, ic)
        dt, J = params.dt, params.n_steps
        t = np.arange(J + 1) * dt
        E = np.asarray(rate.cumulative(t), dtype=float)
        dE = np.diff(E)

        w_eta = _cells_on_grid(ic.eta0, dt)
        w_nu = _cells_on_grid(ic.nu0, dt)
        n_eta, n_nu = w_eta.size, w_nu.size
        avg_gr = np.diff(np.asarray(Gr.integrated_ccdf(np.arange(n_eta + J + 3) * dt))) / dt
        avg_gs = np.diff(np.asarray(Gs.integrated_ccdf(np.arange(n_nu + J + 3) * dt))) / dt
        if np.any((w_eta > 0) & (avg_gr[:n_eta] <= 0)):
            raise InvalidMeasureError("initial queue charges ages beyond the patience support")
        if np.any((w_nu > 0) & (avg_gs[:n_nu] <= 0)):
            raise InvalidMeasureError("initial service measure charges ages beyond the service support")

        src = np.zeros(n_eta + J)
        src[:n_eta] = (w_eta / np.where(avg_gr[:n_eta] > 0, avg_gr[:n_eta], 1.0))[::-1]
        src[n_eta:] = dE
        srck = np.zeros(n_nu + J)
        srck[:n_nu] = (w_nu / np.where(avg_gs[:n_nu] > 0, avg_gs[:n_nu], 1.0))[::-1]

        nu_atoms = ic.nu0.atoms
        b_atom = np.zeros(J + 1)
        for y, m in nu_atoms:
            s0 = float(Gs.ccdf(y))
            if s0 <= 0:
                raise InvalidMeasureError("initial service atom beyond the service support")
            b_atom += m * np.asarray(Gs.ccdf(y + t)) / s0
        live = np.nonzero(avg_gs > 0)[0]
        n_gs = int(live[-1]) if live.size else 0

        grids = dict(E=E, dE=dE, src=src, n_eta=n_eta, avg_gr=avg_gr, srck=srck, n_nu=n_nu,
                     avg_gs=avg_gs, n_gs=n_gs, b_atom=b_atom, nu_atoms=nu_atoms)
        tr = Trajectory(rate, Gs, Gr, ic, params, grids)
        tr.X[0] = ic.X0
        tr.B[0] = min(ic.X0, 1.0)
        tr.Q[0] = max(ic.X0 - 1.0, 0.0)
        tr.chi[0], clamp = kern.frontier(0, tr.Q[0], src, n_eta, avg_gr, dt)
        tr.flags[0] = int(clamp)
        self.B0 = ic.nu0.total_mass
        self.hist = int(round(params.history_cutoff / dt)) if params.history_cutoff else 0
        self.traj = tr

    def _advance(self, j1: int) -> None:
        tr, p = self.traj, self.traj.params
        j0 = tr.filled + 1
        if j0 >= j1:
            return
        status = kern.march(j0, j1, tr.dt, tr.E, tr.dE, tr.X[0], self.B0, tr.src, tr.n_eta, tr.avg_gr,
                            tr.srck, tr.n_nu, tr.avg_gs, tr.n_gs, tr.b_atom, self.hist,
                            tr.X, tr.B, tr.Q, tr.K, tr.D, tr.R, tr.chi, tr.kappa, tr.iters, tr.flags,
                            p.max_iter, p.tol)
        if status >= 0:
            tr.filled = status - 1
            raise StepFailureError(
                f"frontier fixed point did not converge at t = {status * tr.dt:g}",
                {"step": int(status), "t": status * tr.dt, "iterations": int(tr.iters[status]),
                 "chi_prev": float(tr.chi[status - 1]), "Q_prev": float(tr.Q[status - 1])})
        tr.filled = j1 - 1
        band = p.regime_band
        seg = slice(j0, j1)
        tr.regime[seg] = np.where(np.abs(tr.X[seg] - 1.0) <= band, 1, np.where(tr.X[seg] > 1.0, 2, 0))
        if j0 == 1 and j1 > 1:
            tr.kappa[0] = tr.kappa[1]
            tr.regime[0] = 1 if abs(tr.X[0] - 1.0) <= band else (2 if tr.X[0] > 1 else 0)

    def step(self) -> Trajectory:
        j = self.traj.filled + 1
        if j > self.traj.J:
            raise ValueError("trajectory already reaches T")
        self._advance(j + 1)
        return self.traj

    def run(self) -> Trajectory:
        self._advance(self.traj.J + 1)
        return self.traj


def solve(rate: ArrivalRate, Gs: Distribution, Gr: Distribution, ic: InitialCondition,
          params: SolverParams = SolverParams()) -> Trajectory:
    return ElapsedSolver(rate, Gs, Gr, ic, params).run()
