"""Residual-time measures read off an elapsed-time trajectory.

For content in service the residual service time, and for content in queue
the residual patience, are described by their tail functions

    nu_res_t(z, inf)  = sum over initial service content of the survival ratio
                        at y + t + z, plus int_0^t Gs_bar(t - s + z) dK(s)
    eta_res_t(z, inf) = the same for the part of the initial queue that has
                        not yet been reached (y <= chi(t) - t), plus
                        int_{(t - chi(t))^+}^t Gr_bar(t - s + z) lambda(s) ds.

The tails are evaluated by quadrature directly from K, lambda and the initial
measures, independently of the solver's stepping, so comparing them with the
elapsed-time measures at time t + z is a genuine check.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .distributions import Distribution
from .elapsed import InitialCondition, Trajectory
from .errors import UnsupportedModelError
from .measures import GridMeasure, Interval

_CHUNK = 4_000_000


@dataclass
class ResidualSlice:
    t: float
    z: np.ndarray          # residual grid, z[0] = 0
    nu_tail: np.ndarray    # nu_res_t(z, inf)
    eta_tail: np.ndarray   # eta_res_t(z, inf)
    nu_res: GridMeasure
    eta_res: GridMeasure
    varsigma: float        # t - chi(t)

    def mean_residual_work(self) -> float:
        """int z nu_res_t(dz), from the tail: int_0^inf nu_res_t(z, inf) dz."""
        return float(np.sum(0.5 * (self.nu_tail[1:] + self.nu_tail[:-1]) * np.diff(self.z)))


@dataclass
class CouplingReport:
    t: np.ndarray
    z: np.ndarray
    nu_residual: np.ndarray   # |nu_res_t(z, inf) - nu_{t+z}[z, inf)|, shape (len t, len z)
    eta_residual: np.ndarray  # |eta_res_t(z, inf) - eta_{t+z}[z, chi(t) + z]|
    nu_tail: np.ndarray
    eta_tail: np.ndarray

    @property
    def max_residual(self) -> float:
        return float(max(self.nu_residual.max(), self.eta_residual.max()))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "z", "nu_tail", "eta_tail", "coupling_residual"])
            for a, t in enumerate(self.t):
                for b, z in enumerate(self.z):
                    res = max(self.nu_residual[a, b], self.eta_residual[a, b])
                    w.writerow([f"{v:.12g}" for v in (t, z, self.nu_tail[a, b], self.eta_tail[a, b], res)])


# -- quadrature helpers --

def _grid_aligned(z: np.ndarray, dt: float) -> np.ndarray | None:
    m = np.rint(z / dt)
    if np.all(np.abs(m * dt - z) <= 1e-9 * max(dt, 1.0)) and np.all(m >= 0):
        return m.astype(np.int64)
    return None


def _lattice_sum(a: np.ndarray, x0: float, dt: float, f, z: np.ndarray) -> np.ndarray:
    """sum_i a[i] f(x0 + i dt + z) for every z."""
    out = np.zeros(z.size)
    if a.size == 0 or z.size == 0:
        return out
    m = _grid_aligned(z, dt)
    if m is not None and z.size > 8:
        vals = np.asarray(f(x0 + np.arange(a.size + int(m.max())) * dt), dtype=float)
        corr = fftconvolve(vals, a[::-1])[a.size - 1:]
        return corr[m]
    x = x0 + np.arange(a.size) * dt
    return _scattered_sum(a, x, f, z)


def _scattered_sum(w: np.ndarray, x: np.ndarray, f, z: np.ndarray) -> np.ndarray:
    """sum_k w[k] f(x[k] + z) for every z, chunked to bound memory."""
    out = np.zeros(z.size)
    keep = w != 0
    w, x = w[keep], x[keep]
    if w.size == 0:
        return out
    step = max(1, _CHUNK // w.size)
    for lo in range(0, z.size, step):
        zz = z[lo:lo + step]
        out[lo:lo + step] = np.asarray(f(x[None, :] + zz[:, None]), dtype=float) @ w
    return out


def _initial_layer(m: GridMeasure, law: Distribution, upper: float):
    """Cell weights w_k / survival(y_k) and midpoints y_k of ``m`` restricted to ages <= upper.

    A cell cut by ``upper`` keeps the fraction of its mass below the cut.
    """
    mid = m.midpoints
    lo, hi = m.edges[:-1], m.edges[1:]
    frac = np.clip((upper - lo) / (hi - lo), 0.0, 1.0)
    w = m.cell_masses * frac
    sf = np.asarray(law.ccdf(mid), dtype=float)
    w = np.where(w > 0, w / np.where(sf > 0, sf, 1.0), 0.0)
    locs = m.atom_locs[m.atom_locs <= upper]
    masses = m.atom_masses[m.atom_locs <= upper]
    if locs.size:
        sf_at = np.asarray(law.ccdf(locs), dtype=float)
        w = np.concatenate([w, masses / sf_at])
        mid = np.concatenate([mid, locs])
    return w, mid


def _chi(traj: Trajectory, t: float) -> float:
    return float(traj.chi[traj.index(t)])


def varsigma0(ic: InitialCondition) -> float:
    """Arrival time of the oldest initial queue content, -inf{x : eta_0[0, x) >= X(0) - nu_0 mass}."""
    q = ic.X0 - ic.nu0.total_mass
    if q <= 0:
        return 0.0
    return -ic.eta0.quantile_age(min(q, ic.eta0.total_mass))


# -- tails --

def nu_tail(traj: Trajectory, t: float, z) -> np.ndarray:
    """nu_res_t(z, inf) at each z; K-increments sit at step midpoints."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    j, dt, Gs = traj.index(t), traj.dt, traj.Gs
    dK = traj.dK[1:j + 1][::-1]  # age index i = j - s
    out = _lattice_sum(dK, 0.5 * dt, dt, Gs.ccdf, z)
    w, y = _initial_layer(traj.ic.nu0, Gs, math.inf)
    return out + _scattered_sum(w, y + t, Gs.ccdf, z)


def eta_tail(traj: Trajectory, t: float, z) -> np.ndarray:
    """eta_res_t(z, inf) at each z, with the frontier taken from the trajectory."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    dt, Gr = traj.dt, traj.Gr
    chi = _chi(traj, t)
    cut = min(chi, t)
    # arrivals in [t - cut, t]: exact survival integral per cell, rate at the cell midpoint
    n_full = int(math.floor(cut / dt + 1e-9))
    out = np.zeros(z.size)
    if n_full:
        lam = np.asarray(traj.rate(t - (np.arange(n_full) + 0.5) * dt), dtype=float)
        diff = lambda x: np.asarray(Gr.integrated_ccdf(x + dt)) - np.asarray(Gr.integrated_ccdf(x))
        out += _lattice_sum(lam, 0.0, dt, diff, z)
    rest = cut - n_full * dt
    if rest > 1e-12:
        u0 = n_full * dt
        lam_r = float(traj.rate(t - u0 - 0.5 * rest))
        out += lam_r * (np.asarray(Gr.integrated_ccdf(cut + z)) - np.asarray(Gr.integrated_ccdf(u0 + z)))
    if chi >= t and traj.ic.eta0.total_mass > 0:
        w, y = _initial_layer(traj.ic.eta0, Gr, chi - t)
        out += _scattered_sum(w, y + t, Gr.ccdf, z)
    return out


def _tail_measure(z: np.ndarray, tail: np.ndarray, cap: float) -> GridMeasure:
    cells = np.maximum(-np.diff(tail), 0.0)
    cells[-1] += max(tail[-1], 0.0)  # mass beyond the last grid point
    return GridMeasure.from_cell_masses(z, cells, H_cap=cap)


def _z_grid(traj: Trajectory, law: Distribution, z_max: float | None) -> np.ndarray:
    upper = z_max if z_max is not None else min(law.age_horizon(), law.H)
    return GridMeasure.uniform_grid(traj.dt, max(upper, traj.dt))


def residual_slice(traj: Trajectory, t: float, z_max: float | None = None) -> ResidualSlice:
    """Residual measures at time t on the dt grid (up to the age horizons unless ``z_max``)."""
    zs = _z_grid(traj, traj.Gs, z_max)
    zr = _z_grid(traj, traj.Gr, z_max)
    ns = nu_tail(traj, t, zs)
    ne = eta_tail(traj, t, zr)
    z = zs if zs.size >= zr.size else zr
    return ResidualSlice(
        t=t, z=z,
        nu_tail=np.interp(z, zs, ns, right=0.0), eta_tail=np.interp(z, zr, ne, right=0.0),
        nu_res=_tail_measure(zs, ns, traj.Gs.H), eta_res=_tail_measure(zr, ne, traj.Gr.H),
        varsigma=t - _chi(traj, t))


def check_coupling(traj: Trajectory, ts=None, zs=None, n: int = 10) -> CouplingReport:
    """Compare residual tails at t with elapsed-time masses at t + z on a (t, z) grid.

    Defaults: n times on [0, T/2] and n lags on [0, T/2], snapped to grid points.
    """
    dt, T = traj.dt, traj.filled * traj.dt
    ts = np.linspace(0.0, T / 2, n) if ts is None else np.asarray(ts, dtype=float)
    zs = np.linspace(0.0, T / 2, n) if zs is None else np.asarray(zs, dtype=float)
    ts = np.rint(ts / dt) * dt
    zs = np.rint(zs / dt) * dt
    shape = (ts.size, zs.size)
    res_nu, res_eta = np.zeros(shape), np.zeros(shape)
    tail_nu, tail_eta = np.full(shape, np.nan), np.full(shape, np.nan)
    for a, t in enumerate(ts):
        ok = t + zs <= T + 1e-9
        if not np.any(ok):
            continue
        chi = _chi(traj, t)
        tn = nu_tail(traj, t, zs[ok])
        te = eta_tail(traj, t, zs[ok])
        for b, (z, vn, ve) in enumerate(zip(zs[ok], tn, te)):
            k = traj.index(t + z)
            grid_nu = traj.nu(k).mass(Interval(z, math.inf))
            grid_eta = traj.eta(k).mass(Interval.closed(z, chi + z))
            col = np.nonzero(ok)[0][b]
            tail_nu[a, col], tail_eta[a, col] = vn, ve
            res_nu[a, col] = abs(vn - grid_nu)
            res_eta[a, col] = abs(ve - grid_eta)
    return CouplingReport(ts, zs, res_nu, res_eta, tail_nu, tail_eta)


def check_initial_identities(ic: InitialCondition, Gs: Distribution, Gr: Distribution, zs) -> dict:
    """Residual tails at time 0 against the aged initial measures.

    Both sides use the same midpoint survival ratios, so agreement is to roundoff.
    """
    zs = np.atleast_1d(np.asarray(zs, dtype=float))
    chi0 = -varsigma0(ic)
    w_s, y_s = _initial_layer(ic.nu0, Gs, math.inf)
    w_r, y_r = _initial_layer(ic.eta0, Gr, chi0)
    nu_res = _scattered_sum(w_s, y_s, Gs.ccdf, zs)
    eta_res = _scattered_sum(w_r, y_r, Gr.ccdf, zs)
    worst_nu = worst_eta = 0.0
    for z, vn, ve in zip(zs, nu_res, eta_res):
        aged_nu = ic.nu0.age_and_thin(z, Gs).mass(Interval(z, math.inf))
        aged_eta = ic.eta0.age_and_thin(z, Gr).mass(Interval.closed(z, chi0 + z))
        worst_nu = max(worst_nu, abs(vn - aged_nu))
        worst_eta = max(worst_eta, abs(ve - aged_eta))
    return {"nu": worst_nu, "eta": worst_eta, "varsigma0": -chi0}


def residual_densities(traj: Trajectory, t: float, y) -> tuple[np.ndarray, np.ndarray]:
    """Densities of the residual measures at points y.

    These are the exact z-derivatives of the quadratures behind ``nu_tail`` and
    ``eta_tail``, so integrating them reproduces the tails.
    """
    Gs, Gr, dt = traj.Gs, traj.Gr, traj.dt
    if not (Gs.has_density and Gr.has_density):
        raise UnsupportedModelError("residual densities need service and patience densities")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    j = traj.index(t)
    dK = traj.dK[1:j + 1][::-1]
    b = _lattice_sum(dK, 0.5 * dt, dt, Gs.density, y)
    w, x = _initial_layer(traj.ic.nu0, Gs, math.inf)
    b += _scattered_sum(w, x + t, Gs.density, y)

    chi = _chi(traj, t)
    cut = min(chi, t)
    n_full = int(math.floor(cut / dt + 1e-9))
    q = np.zeros(y.size)
    if n_full:
        lam = np.asarray(traj.rate(t - (np.arange(n_full) + 0.5) * dt), dtype=float)
        drop = lambda u: np.asarray(Gr.ccdf(u)) - np.asarray(Gr.ccdf(u + dt))
        q += _lattice_sum(lam, 0.0, dt, drop, y)
    rest = cut - n_full * dt
    if rest > 1e-12:
        u0 = n_full * dt
        lam_r = float(traj.rate(t - u0 - 0.5 * rest))
        q += lam_r * (np.asarray(Gr.ccdf(u0 + y)) - np.asarray(Gr.ccdf(cut + y)))
    if chi >= t and traj.ic.eta0.total_mass > 0:
        w, x = _initial_layer(traj.ic.eta0, Gr, chi - t)
        q += _scattered_sum(w, x + t, Gr.density, y)
    return b, q
