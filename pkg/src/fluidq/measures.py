"""Finite measures on [0, H) stored as a cellwise-constant density plus atoms."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from .distributions import Distribution
from .errors import InvalidMeasureError, OutOfRangeError

QUANTILE_TOL = 1e-12


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    lo_closed: bool = True
    hi_closed: bool = True

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError("interval needs lo <= hi")

    @classmethod
    def closed(cls, lo, hi):
        return cls(lo, hi, True, True)

    @classmethod
    def left_open(cls, lo, hi):
        """(lo, hi]"""
        return cls(lo, hi, False, True)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        left = x >= self.lo if self.lo_closed else x > self.lo
        right = x <= self.hi if self.hi_closed else x < self.hi
        return left & right


@dataclass(frozen=True, eq=False)
class GridMeasure:
    edges: np.ndarray
    density: np.ndarray
    atom_locs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    atom_masses: np.ndarray = field(default_factory=lambda: np.zeros(0))
    H_cap: float = math.inf

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        dens = np.asarray(self.density, dtype=float)
        locs = np.atleast_1d(np.asarray(self.atom_locs, dtype=float))
        masses = np.atleast_1d(np.asarray(self.atom_masses, dtype=float))
        if edges.ndim != 1 or edges.size < 2 or edges[0] != 0.0 or np.any(np.diff(edges) <= 0):
            raise InvalidMeasureError("grid must start at 0 and increase strictly")
        if dens.shape != (edges.size - 1,):
            raise InvalidMeasureError("need one density value per grid cell")
        if np.any(dens < 0) or not np.all(np.isfinite(dens)):
            raise InvalidMeasureError("density must be finite and nonnegative")
        if locs.shape != masses.shape or np.any(masses < 0) or np.any(locs < 0):
            raise InvalidMeasureError("atoms need nonnegative locations and masses")
        keep = masses > 0
        locs, masses = locs[keep], masses[keep]
        order = np.argsort(locs, kind="stable")
        locs, masses = locs[order], masses[order]
        if locs.size and np.any(np.diff(locs) == 0):
            uniq, inv = np.unique(locs, return_inverse=True)
            masses = np.bincount(inv, weights=masses)
            locs = uniq
        if locs.size and locs[-1] >= self.H_cap:
            raise InvalidMeasureError("atom at or beyond the support cap")
        for name, val in (("edges", edges), ("density", dens), ("atom_locs", locs), ("atom_masses", masses)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    # -- construction helpers --
    @classmethod
    def zero(cls, edges, H_cap=math.inf) -> "GridMeasure":
        edges = np.asarray(edges, dtype=float)
        return cls(edges, np.zeros(edges.size - 1), H_cap=H_cap)

    @classmethod
    def uniform_grid(cls, step: float, upper: float) -> np.ndarray:
        n = max(int(math.ceil(upper / step - 1e-9)), 1)
        return np.arange(n + 1) * step

    @classmethod
    def from_density(cls, edges, f: Callable, H_cap=math.inf, atoms=()) -> "GridMeasure":
        """Sample ``f`` at cell midpoints."""
        edges = np.asarray(edges, dtype=float)
        mid = 0.5 * (edges[:-1] + edges[1:])
        dens = np.asarray(f(mid), dtype=float) * np.ones_like(mid)
        locs = [a for a, _ in atoms]
        masses = [m for _, m in atoms]
        return cls(edges, dens, np.asarray(locs, float), np.asarray(masses, float), H_cap)

    @classmethod
    def from_cell_masses(cls, edges, masses, H_cap=math.inf) -> "GridMeasure":
        edges = np.asarray(edges, dtype=float)
        return cls(edges, np.asarray(masses, dtype=float) / np.diff(edges), H_cap=H_cap)

    # -- basic quantities --
    @cached_property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @cached_property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @cached_property
    def cell_masses(self) -> np.ndarray:
        return self.density * self.widths

    @cached_property
    def _ac_cum(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.cell_masses)])

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.atom_locs.tolist(), self.atom_masses.tolist()))

    @property
    def has_atoms(self) -> bool:
        return self.atom_locs.size > 0

    @cached_property
    def total_mass(self) -> float:
        return float(self._ac_cum[-1] + self.atom_masses.sum())

    def _ac_cdf(self, x) -> np.ndarray:
        """Absolutely continuous mass of [0, x]."""
        x = np.asarray(x, dtype=float)
        return np.interp(x, self.edges, self._ac_cum)

    # -- queries --
    def mass(self, iv: Interval) -> float:
        ac = float(self._ac_cdf(iv.hi) - self._ac_cdf(iv.lo))
        at = float(self.atom_masses[iv.contains(self.atom_locs)].sum()) if self.has_atoms else 0.0
        return max(ac, 0.0) + at

    def cumulative(self, x):
        """mass([0, x]), right-continuous."""
        x = np.asarray(x, dtype=float)
        out = self._ac_cdf(x)
        if self.has_atoms:
            cum_atoms = np.concatenate([[0.0], np.cumsum(self.atom_masses)])
            out = out + cum_atoms[np.searchsorted(self.atom_locs, x, side="right")]
        return float(out) if out.ndim == 0 else out

    def integrate(self, f: Callable) -> float:
        val = float(np.sum(np.asarray(f(self.midpoints), dtype=float) * self.cell_masses))
        if self.has_atoms:
            val += float(np.sum(np.asarray(f(self.atom_locs), dtype=float) * self.atom_masses))
        return val

    @cached_property
    def _breaks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pts = np.union1d(self.edges, self.atom_locs) if self.has_atoms else self.edges.copy()
        cum = np.asarray(self.cumulative(pts), dtype=float)
        jump = np.zeros_like(pts)
        if self.has_atoms:
            jump[np.searchsorted(pts, self.atom_locs)] = self.atom_masses
        return pts, cum, jump

    def quantile_age(self, q: float) -> float:
        """inf{x : mass([0, x]) >= q}, interpolating linearly inside a cell."""
        if q < 0 or q > self.total_mass + QUANTILE_TOL:
            raise OutOfRangeError(f"level {q} outside [0, {self.total_mass}]")
        target = q - QUANTILE_TOL
        if target <= 0:
            return 0.0
        pts, cum, jump = self._breaks
        k = int(np.searchsorted(cum, target, side="left"))
        if k >= pts.size:
            k = pts.size - 1
        if k == 0:
            return float(pts[0])
        left_val = cum[k] - jump[k]
        if left_val < target:
            return float(pts[k])
        lo_val = cum[k - 1]
        span = left_val - lo_val
        frac = (target - lo_val) / span if span > 0 else 1.0
        return float(pts[k - 1] + frac * (pts[k] - pts[k - 1]))

    # -- transformations --
    def rebin(self, new_edges) -> "GridMeasure":
        """Mass-preserving transfer of the a.c. part to ``new_edges``; atoms unchanged."""
        new_edges = np.asarray(new_edges, dtype=float)
        cum = np.interp(new_edges, self.edges, self._ac_cum)
        return GridMeasure(new_edges, np.maximum(np.diff(cum), 0.0) / np.diff(new_edges),
                           self.atom_locs, self.atom_masses, self.H_cap)

    def scaled(self, c: float) -> "GridMeasure":
        return GridMeasure(self.edges, self.density * c, self.atom_locs, self.atom_masses * c, self.H_cap)

    def plus(self, other: "GridMeasure") -> "GridMeasure":
        if other.edges.shape != self.edges.shape or np.any(other.edges != self.edges):
            other = other.rebin(self.edges)
        return GridMeasure(self.edges, self.density + other.density,
                           np.concatenate([self.atom_locs, other.atom_locs]),
                           np.concatenate([self.atom_masses, other.atom_masses]),
                           min(self.H_cap, other.H_cap))

    def restricted(self, iv: Interval) -> "GridMeasure":
        """The measure restricted to ``iv`` (cells cut exactly at the endpoints)."""
        lo_c = np.clip(self.edges[:-1], iv.lo, iv.hi)
        hi_c = np.clip(self.edges[1:], iv.lo, iv.hi)
        dens = self.density * (hi_c - lo_c) / self.widths
        keep = iv.contains(self.atom_locs)
        return GridMeasure(self.edges, dens, self.atom_locs[keep], self.atom_masses[keep], self.H_cap)

    def age_and_thin(self, t: float, law: Distribution) -> "GridMeasure":
        """Shift ages by ``t`` and thin by the survival ratio of ``law``."""
        if t < 0:
            raise ValueError("aging time must be nonnegative")
        if t == 0:
            return self
        mid = self.midpoints
        sf_mid = np.asarray(law.ccdf(mid))
        live = self.cell_masses > 0
        if np.any(live & (sf_mid <= 0)):
            raise InvalidMeasureError("measure charges ages with zero survival probability")
        ratio = np.where(live, np.asarray(law.ccdf(mid + t)) / np.where(sf_mid > 0, sf_mid, 1.0), 0.0)
        moved = self.cell_masses * ratio

        locs, masses = self.atom_locs, self.atom_masses
        if self.has_atoms:
            sf_at = np.asarray(law.ccdf(locs))
            if np.any(sf_at <= 0):
                raise InvalidMeasureError("atom sits at an age with zero survival probability")
            masses = masses * np.asarray(law.ccdf(locs + t)) / sf_at
            locs = locs + t

        edges = self.edges
        reach = edges[-1] + t
        horizon = min(law.age_horizon(), self.H_cap)
        if np.any(moved > 0) and reach > edges[-1] and np.ptp(np.diff(edges)) < 1e-12 * edges[-1]:
            # uniform grid: extend so shifted mass is not cut off
            step = edges[1] - edges[0]
            upper = min(reach, max(horizon, edges[-1]))
            edges = GridMeasure.uniform_grid(step, max(upper, edges[-1]))
        shifted = self.edges + t
        cum = np.concatenate([[0.0], np.cumsum(moved)])
        new_cum = np.interp(edges, shifted, cum, left=0.0, right=cum[-1])
        dens = np.maximum(np.diff(new_cum), 0.0) / np.diff(edges)
        cap = self.H_cap
        keep = (masses > 0) & (locs < cap)
        return GridMeasure(edges, dens, locs[keep], masses[keep], cap)

    # -- io --
    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x_lo", "x_hi", "density"])
            for lo, hi, d in zip(self.edges[:-1], self.edges[1:], self.density):
                w.writerow([f"{lo:.12g}", f"{hi:.12g}", f"{d:.12g}"])
        with open(atoms_path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["loc", "mass"])
            for loc, m in self.atoms:
                w.writerow([f"{loc:.12g}", f"{m:.12g}"])

    @classmethod
    def from_csv(cls, path: str | Path, H_cap=math.inf) -> "GridMeasure":
        path = Path(path)
        rows = _read_rows(path)
        if not rows:
            raise InvalidMeasureError(f"{path}: no rows")
        arr = np.asarray(rows, dtype=float)
        if arr.shape[1] >= 3:
            edges = np.concatenate([arr[:, 0], arr[-1:, 1]])
            dens = arr[:, 2]
        else:
            # (age, density) rows: ages are left cell edges on a uniform grid
            step = arr[1, 0] - arr[0, 0] if arr.shape[0] > 1 else 1.0
            edges = np.concatenate([arr[:, 0], [arr[-1, 0] + step]])
            dens = arr[:, 1]
        locs = masses = np.zeros(0)
        ap = atoms_path(path)
        if ap.exists():
            at = _read_rows(ap)
            if at:
                at = np.asarray(at, dtype=float)
                locs, masses = at[:, 0], at[:, 1]
        return cls(edges, dens, locs, masses, H_cap)

    def __repr__(self):
        return (f"GridMeasure(cells={self.density.size}, span=[0, {self.edges[-1]:g}], "
                f"mass={self.total_mass:.6g}, atoms={self.atom_locs.size})")


def atoms_path(path: Path) -> Path:
    return path.with_name(path.stem + "_atoms.csv")


def _read_rows(path: Path) -> list[list[float]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            try:
                out.append([float(v) for v in row])
            except ValueError:
                continue
    return out


def mass(m: GridMeasure, iv: Interval) -> float:
    return m.mass(iv)


def integrate(m: GridMeasure, f: Callable) -> float:
    return m.integrate(f)


def quantile_age(m: GridMeasure, q: float) -> float:
    return m.quantile_age(q)


def age_and_thin(m: GridMeasure, t: float, law: Distribution) -> GridMeasure:
    return m.age_and_thin(t, law)
