"""Exact simulation of the n-server FCFS queue with abandonment.

Arrivals form a Poisson process with rate n lam(t), generated by thinning.
Because service is FCFS and only queued customers abandon, customers can be
processed in arrival order against a heap of server free times: customer i
would start at max(a_i, earliest free time) and abandons instead if the wait
reaches its patience. Every path quantity is a counting process of the
resulting event times.
"""

from __future__ import annotations

import csv
import heapq
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .arrivals import ArrivalRate
from .distributions import Distribution
from .elapsed import InitialCondition
from .errors import ConfigError
from .measures import GridMeasure

STREAMS = ("arrivals", "service", "patience", "initial")


def _streams(seed) -> dict[str, np.random.Generator]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, ss.spawn(len(STREAMS)))}


def arrival_times(rate: ArrivalRate, n: int, T: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson arrivals with rate n lam(t) on [0, T] by thinning against n sup lam."""
    top = rate.sup(T)
    if not math.isfinite(top):
        raise ConfigError("arrival rate is unbounded on the horizon")
    if top <= 0:
        return np.zeros(0)
    m = rng.poisson(n * top * T)
    cand = np.sort(rng.uniform(0.0, T, m))
    keep = rng.random(m) * top < np.asarray(rate(cand))
    return cand[keep]


def _sample_ages(m: GridMeasure, k: int, rng: np.random.Generator, lo: float = 0.0,
                 hi: float = math.inf) -> np.ndarray:
    """k i.i.d. ages from m restricted to [lo, hi], normalized."""
    if k <= 0:
        return np.zeros(0)
    a = np.clip(m.edges[:-1], lo, hi)
    b = np.clip(m.edges[1:], lo, hi)
    w = m.density * (b - a)
    inside = (m.atom_locs >= lo) & (m.atom_locs <= hi)
    locs, masses = m.atom_locs[inside], m.atom_masses[inside]
    p = np.concatenate([w, masses])
    if p.sum() <= 0:
        raise ConfigError("cannot sample ages from an empty measure")
    idx = rng.choice(p.size, size=k, p=p / p.sum())
    u = rng.random(k)
    cell = idx < w.size
    out = np.empty(k)
    ci = idx[cell]
    out[cell] = a[ci] + u[cell] * (b[ci] - a[ci])
    out[~cell] = locs[idx[~cell] - w.size]
    return out


@dataclass
class SimPath:
    """Customer registry plus counting-process views of one replication.

    Customers with ``arrival < 0`` are initial queue or potential-queue members.
    Initial in-service customers live separately in ``init_age`` and
    ``init_departure``. ``entry`` is NaN for customers who abandoned and for
    ghost members of the initial potential queue, who were never queued.
    """

    n: int
    T: float
    seed: int | None
    arrival: np.ndarray
    patience: np.ndarray
    service: np.ndarray
    entry: np.ndarray
    queued: np.ndarray          # False for ghost potential-queue members
    init_age: np.ndarray
    init_departure: np.ndarray

    @property
    def abandoned(self) -> np.ndarray:
        return self.queued & np.isnan(self.entry)

    def _times(self):
        q = self.queued
        arr = self.arrival[q & (self.arrival >= 0)]
        ent = self.entry[~np.isnan(self.entry)]
        dep = np.concatenate([self.init_departure, ent + self.service[~np.isnan(self.entry)]])
        ab = (self.arrival + self.patience)[self.abandoned]
        return arr, ent, dep, ab

    @property
    def X0(self) -> int:
        return int(self.init_age.size + np.sum(self.queued & (self.arrival < 0)))

    @property
    def B0(self) -> int:
        return int(self.init_age.size + np.sum(self.queued & (self.arrival < 0) & (self.entry == 0.0)))

    def counts(self, t) -> dict[str, np.ndarray]:
        """Unscaled A, K, D, R, X, B, Q at times t (right-continuous)."""
        t = np.asarray(t, dtype=float)
        arr, ent, dep, ab = self._times()
        c = lambda ev: np.searchsorted(np.sort(ev), t, side="right")
        A = c(arr)
        init_q = self.queued & (self.arrival < 0)
        K = c(ent[ent > 0]) if ent.size else np.zeros(t.shape, dtype=np.int64)
        D, R = c(dep), c(ab)
        X = self.init_age.size + int(init_q.sum()) + A - D - R
        n_start = self.init_age.size + int(np.sum(init_q & (self.entry == 0.0)))
        B = n_start + K - D
        return {"A": A, "K": K, "D": D, "R": R, "X": X, "B": B, "Q": X - B}

    def scaled(self, t) -> dict[str, np.ndarray]:
        return {k: v / self.n for k, v in self.counts(t).items()}

    def event_series(self) -> dict[str, np.ndarray]:
        """Counts just after every event time in [0, T]."""
        arr, ent, dep, ab = self._times()
        ts = np.unique(np.concatenate([[0.0], arr, ent, dep, ab]))
        ts = ts[(ts >= 0) & (ts <= self.T)]
        out = self.counts(ts)
        out["t"] = ts
        return out

    def check(self) -> dict[str, int]:
        """Integer conservation and non-idling violations over all event times."""
        s = self.event_series()
        arrivals = s["A"] + self.X0
        leaving = s["X"] + s["R"] + s["D"]
        return {
            "conservation": int(np.max(np.abs(arrivals - leaving))) if arrivals.size else 0,
            "non_idling": int(np.sum((s["Q"] > 0) & (s["B"] < self.n))),
            "capacity": int(np.sum(s["B"] > self.n)),
        }

    def to_csv(self, path) -> None:
        s = self.event_series()
        cols = ("t", "X", "B", "Q", "K", "R", "D")
        with open(path, "w", newline="") as fh:
            fh.write(f"# seed={self.seed} n={self.n}\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for row in zip(*(s[c] for c in cols)):
                w.writerow([f"{float(v):.12g}" for v in row])


def _initial_population(ic: InitialCondition | None, n: int, Gs: Distribution, Gr: Distribution,
                        rng: np.random.Generator):
    """Initial customers with i.i.d. ages from the normalized initial measures."""
    empty = np.zeros(0)
    if ic is None:
        return empty, empty, empty, empty, np.zeros(0, dtype=bool), empty
    n_serv = int(round(n * ic.nu0.total_mass))
    if n_serv > n:
        raise ConfigError("initial service content exceeds the number of servers")
    s_age = _sample_ages(ic.nu0, n_serv, rng)
    s_dep = Gs.sample_residual(rng, s_age) if n_serv else empty

    q0 = max(ic.X0 - ic.nu0.total_mass, 0.0)
    chi0 = ic.eta0.quantile_age(min(q0, ic.eta0.total_mass)) if q0 > 0 else 0.0
    n_queue = int(round(n * q0))
    n_ghost = int(round(n * (ic.eta0.total_mass - q0)))
    q_age = _sample_ages(ic.eta0, n_queue, rng, 0.0, chi0)
    g_age = _sample_ages(ic.eta0, n_ghost, rng, chi0, math.inf) if n_ghost else empty
    ages = np.concatenate([q_age, g_age])
    rem = Gr.sample_residual(rng, ages) if ages.size else empty
    queued = np.concatenate([np.ones(n_queue, bool), np.zeros(g_age.size, bool)])
    return s_age, s_dep, -ages, ages + rem, queued, rem


def simulate(n: int, rate: ArrivalRate, Gs: Distribution, Gr: Distribution, T: float,
             seed=0, ic: InitialCondition | None = None) -> SimPath:
    """One replication with n servers, arrival rate n lam(t), over [0, T]."""
    if n < 1:
        raise ConfigError("need at least one server")
    rngs = _streams(seed)
    s_age, s_dep, a0, p0, queued0, _ = _initial_population(ic, n, Gs, Gr, rngs["initial"])
    arr = arrival_times(rate, n, T, rngs["arrivals"])
    arrival = np.concatenate([a0, arr])
    patience = np.concatenate([p0, Gr.sample(rngs["patience"], arr.size)])
    service = Gs.sample(rngs["service"], arrival.size)
    queued = np.concatenate([queued0, np.ones(arr.size, bool)])

    # FCFS among queued customers: initial queue oldest first, then arrivals
    order = np.argsort(arrival, kind="stable")
    free = sorted(s_dep.tolist()) + [0.0] * (n - s_dep.size)
    heapq.heapify(free)
    entry = np.full(arrival.size, np.nan)
    for i in order.tolist():
        if not queued[i]:
            continue
        a = arrival[i]
        f = free[0]
        s = f if f > a else a
        if s - a >= patience[i]:
            continue
        entry[i] = s
        heapq.heapreplace(free, s + service[i])
    seed_val = seed if isinstance(seed, (int, np.integer)) else None
    return SimPath(n, T, seed_val, arrival, patience, service, entry, queued, s_age, s_dep)


def empirical_measures(path: SimPath, t: float, step: float, upper: float | None = None):
    """(eta_hat_t, nu_hat_t) / n as histograms with bin width ``step``.

    The potential queue holds everyone who has arrived and whose patience has
    not yet run out, whether waiting, in service or gone.
    """
    ent = path.entry
    served = ~np.isnan(ent)
    in_serv = served & (ent <= t) & (ent + path.service > t)
    s_ages = np.concatenate([t - ent[in_serv], (path.init_age + t)[path.init_departure > t]])
    live = (path.arrival <= t) & (path.arrival + path.patience > t)
    e_ages = t - path.arrival[live]
    top = upper if upper is not None else max(float(np.max(s_ages, initial=0.0)),
                                               float(np.max(e_ages, initial=0.0)), step)
    edges = GridMeasure.uniform_grid(step, top + step)
    h = lambda x: np.histogram(x, bins=edges)[0] / path.n
    return GridMeasure.from_cell_masses(edges, h(e_ages)), GridMeasure.from_cell_masses(edges, h(s_ages))


def measure_distance(m1: GridMeasure, m2: GridMeasure) -> float:
    """Sup distance between the cumulative mass functions."""
    pts = np.union1d(m1.edges, m2.edges)
    return float(np.max(np.abs(np.asarray(m1.cumulative(pts)) - np.asarray(m2.cumulative(pts)))))


@dataclass
class Aggregate:
    t: np.ndarray
    mean: dict
    stderr: dict
    seed: int
    reps: int

    def to_csv(self, path) -> None:
        cols = sorted(self.mean)
        with open(path, "w", newline="") as fh:
            fh.write(f"# seed={self.seed} reps={self.reps}\n")
            w = csv.writer(fh)
            w.writerow(["t"] + [f"{c}_mean" for c in cols] + [f"{c}_se" for c in cols])
            for k in range(self.t.size):
                w.writerow([f"{v:.12g}" for v in [self.t[k]] + [self.mean[c][k] for c in cols]
                            + [self.stderr[c][k] for c in cols]])


def _one(args):
    n, rate, Gs, Gr, T, ss, ic, grid = args
    return simulate(n, rate, Gs, Gr, T, ss, ic).scaled(grid)


def replicate(n: int, rate: ArrivalRate, Gs: Distribution, Gr: Distribution, T: float,
              reps: int, seed: int = 0, ic: InitialCondition | None = None,
              grid=None, workers: int = 1) -> Aggregate:
    """Scaled paths of ``reps`` independent replications on ``grid``, reduced in index order."""
    grid = np.linspace(0.0, T, 1001) if grid is None else np.asarray(grid, dtype=float)
    children = np.random.SeedSequence(seed).spawn(reps)
    jobs = [(n, rate, Gs, Gr, T, c, ic, grid) for c in children]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            paths = list(ex.map(_one, jobs))
    else:
        paths = [_one(j) for j in jobs]
    keys = ("X", "B", "Q", "K", "R", "D")
    stack = {k: np.stack([p[k] for p in paths]) for k in keys}
    mean = {k: v.mean(axis=0) for k, v in stack.items()}
    se = {k: (v.std(axis=0, ddof=1) / math.sqrt(reps) if reps > 1 else np.zeros(grid.size))
          for k, v in stack.items()}
    return Aggregate(grid, mean, se, seed, reps)
