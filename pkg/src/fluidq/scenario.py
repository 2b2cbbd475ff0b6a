"""Scenario files: a JSON description of one model instance and the tasks to run on it.

Top-level keys::

    name        label used for the default output directory
    arrival     arrival-rate spec (see ArrivalRate.from_spec)
    service     service law spec (see distributions.from_spec)
    patience    patience law spec
    initial     {"kind": "empty"}
                {"kind": "layer", "a": 0.5, "scale": 1.0, "nu0": {...}}
                {"kind": "measures", "eta0": "eta.csv", "nu0": "nu.csv", "X0": 1.2}
    numerics    dt, da, T, A_max, max_iter, tol, regime_band
    tolerances  per-check thresholds, overriding DEFAULT_TOLERANCES
    tasks       subset of TASKS; each task's prerequisites must be listed too
    expect      {"zhang_roundtrip": "feasible" | "infeasible"}
    des         n, reps, T, grid_points
    seed        integer seed for the simulator
    output      output directory (relative to the scenario file)

The "layer" initial condition puts eta_0(dx) = scale * lam * 1_[0, a](x) (1 - Gr(x)) dx
entirely in queue on top of a full service layer nu0 ({"kind": "uniform_ages",
"mass": 1, "upper": 1}, "empty" or {"kind": "csv", "path": ...}).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distributions
from .arrivals import ArrivalRate
from .distributions import Distribution
from .elapsed import InitialCondition, SolverParams
from .errors import ConfigError
from .measures import GridMeasure

TASKS = ("solve_elapsed", "whitt_check", "residual_check", "zhang_solve", "zhang_roundtrip", "des_validate")
REQUIRES = {
    "solve_elapsed": (),
    "whitt_check": ("solve_elapsed",),
    "residual_check": ("solve_elapsed",),
    "zhang_solve": (),
    "zhang_roundtrip": ("solve_elapsed",),
    "des_validate": ("solve_elapsed",),
}
DEFAULT_TOLERANCES = {
    "balance": 1e-6,
    "dual": 2e-4,
    "monotone": 1e-9,
    "whitt": 5e-3,
    "coupling": 5e-3,
    "zhang_balance": 1e-6,
    "zhang_vs_elapsed": 1e-3,
    "roundtrip": 1e-4,
    "des_sup": 0.05,
}
_TOP_KEYS = {"name", "arrival", "service", "patience", "initial", "numerics", "tolerances", "tasks",
             "expect", "des", "seed", "output"}
_NUMERIC_KEYS = {"dt", "da", "T", "A_max", "max_iter", "tol", "regime_band"}
_DES_KEYS = {"n", "reps", "T", "grid_points"}


@dataclass
class DesConfig:
    n: int = 500
    reps: int = 100
    T: float = 10.0
    grid_points: int = 1001


@dataclass
class Scenario:
    name: str
    rate: ArrivalRate
    Gs: Distribution
    Gr: Distribution
    initial: dict
    params: SolverParams
    tasks: tuple
    tolerances: dict
    expect: dict = field(default_factory=dict)
    des: DesConfig = field(default_factory=DesConfig)
    seed: int = 0
    output: Path | None = None
    base_dir: Path = Path(".")
    sha256: str = ""

    def initial_condition(self) -> InitialCondition:
        return build_initial(self.initial, self.rate, self.Gs, self.Gr, self.params.dt, self.base_dir)


def _check_keys(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")


def _nu0_from_spec(spec: dict, dt: float, base_dir: Path, H: float) -> GridMeasure:
    kind = spec.get("kind", "empty")
    if kind == "empty":
        _check_keys(spec, {"kind"}, "nu0")
        return InitialCondition.empty(dt).nu0
    if kind == "uniform_ages":
        _check_keys(spec, {"kind", "mass", "upper"}, "nu0")
        mass, upper = float(spec.get("mass", 1.0)), float(spec.get("upper", 1.0))
        edges = GridMeasure.uniform_grid(dt, upper)
        return GridMeasure.from_cell_masses(edges, np.full(edges.size - 1, mass / (edges.size - 1)), H_cap=H)
    if kind == "csv":
        _check_keys(spec, {"kind", "path"}, "nu0")
        return GridMeasure.from_csv(base_dir / spec["path"], H_cap=H)
    raise ConfigError(f"unknown nu0 kind {kind!r}")


def build_initial(spec: dict, rate: ArrivalRate, Gs: Distribution, Gr: Distribution, dt: float,
                  base_dir: Path = Path(".")) -> InitialCondition:
    kind = spec.get("kind", "empty")
    if kind == "empty":
        _check_keys(spec, {"kind"}, "initial")
        return InitialCondition.empty(dt)
    if kind == "layer":
        _check_keys(spec, {"kind", "a", "scale", "nu0"}, "initial")
        if not rate.is_constant:
            raise ConfigError("the layer initial condition needs a constant arrival rate")
        lam = float(rate(0.0)) * float(spec.get("scale", 1.0))
        a = float(spec["a"]) if "a" in spec else 0.0
        edges = GridMeasure.uniform_grid(dt, max(a, dt))
        hi, lo = np.minimum(edges[1:], a), np.minimum(edges[:-1], a)
        cells = lam * (np.asarray(Gr.integrated_ccdf(hi)) - np.asarray(Gr.integrated_ccdf(lo)))
        eta0 = GridMeasure.from_cell_masses(edges, cells, H_cap=Gr.H)
        nu0 = _nu0_from_spec(spec.get("nu0", {"kind": "uniform_ages"}), dt, base_dir, Gs.H)
        return InitialCondition(eta0, nu0, nu0.total_mass + eta0.total_mass)
    if kind == "measures":
        _check_keys(spec, {"kind", "eta0", "nu0", "X0"}, "initial")
        try:
            eta0 = GridMeasure.from_csv(base_dir / spec["eta0"], H_cap=Gr.H)
            nu0 = GridMeasure.from_csv(base_dir / spec["nu0"], H_cap=Gs.H)
            return InitialCondition(eta0, nu0, float(spec["X0"]))
        except KeyError as exc:
            raise ConfigError(f"missing initial key {exc}") from None
    raise ConfigError(f"unknown initial kind {kind!r}")


def _closed_tasks(tasks) -> tuple:
    if not isinstance(tasks, list) or not tasks:
        raise ConfigError("tasks must be a non-empty list")
    unknown = [t for t in tasks if t not in TASKS]
    if unknown:
        raise ConfigError(f"unknown tasks: {unknown}")
    for t in tasks:
        missing = [r for r in REQUIRES[t] if r not in tasks]
        if missing:
            raise ConfigError(f"task {t!r} requires {missing}")
    return tuple(t for t in TASKS if t in tasks)


def parse(raw: dict, base_dir: Path = Path("."), sha256: str = "", seed: int | None = None,
          dt: float | None = None) -> Scenario:
    _check_keys(raw, _TOP_KEYS, "scenario")
    for key in ("arrival", "service", "patience"):
        if key not in raw:
            raise ConfigError(f"scenario is missing {key!r}")
    rate = ArrivalRate.from_spec(raw["arrival"])
    Gs = distributions.from_spec(raw["service"], base_dir)
    Gr = distributions.from_spec(raw["patience"], base_dir)

    num = dict(raw.get("numerics", {}))
    _check_keys(num, _NUMERIC_KEYS, "numerics")
    if dt is not None:
        num["dt"] = dt
        num["da"] = dt
    step = float(num.get("dt", 1e-3))
    da = float(num.get("da", step))
    T = float(num.get("T", 30.0))
    if not (step > 0 and da > 0 and T > 0):
        raise ConfigError("dt, da and T must be positive")
    params = SolverParams(dt=step, T=T, da=da, max_iter=int(num.get("max_iter", 50)),
                          tol=float(num.get("tol", 1e-10)), regime_band=float(num.get("regime_band", 1e-8)),
                          history_cutoff=None if num.get("A_max") is None else float(num["A_max"]))

    tol = dict(DEFAULT_TOLERANCES)
    user_tol = raw.get("tolerances", {})
    _check_keys(user_tol, set(DEFAULT_TOLERANCES), "tolerances")
    tol.update({k: float(v) for k, v in user_tol.items()})

    des_raw = raw.get("des", {})
    _check_keys(des_raw, _DES_KEYS, "des")
    des = DesConfig(**{k: type(getattr(DesConfig, k))(v) for k, v in des_raw.items()})

    expect = raw.get("expect", {})
    _check_keys(expect, {"zhang_roundtrip"}, "expect")
    if expect.get("zhang_roundtrip", "feasible") not in ("feasible", "infeasible"):
        raise ConfigError("expect.zhang_roundtrip must be 'feasible' or 'infeasible'")

    initial = raw.get("initial", {"kind": "empty"})
    if not isinstance(initial, dict):
        raise ConfigError("initial must be a JSON object")
    sc = Scenario(
        name=str(raw.get("name", "scenario")), rate=rate, Gs=Gs, Gr=Gr, initial=initial, params=params,
        tasks=_closed_tasks(raw.get("tasks", ["solve_elapsed"])), tolerances=tol, expect=expect, des=des,
        seed=int(raw.get("seed", 0) if seed is None else seed),
        output=Path(raw["output"]) if "output" in raw else None, base_dir=base_dir, sha256=sha256)
    sc.initial_condition()  # surface initial-condition errors at load time
    return sc


def load(path: str | Path, seed: int | None = None, dt: float | None = None) -> Scenario:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc}") from None
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario is not valid JSON: {exc}") from None
    return parse(raw, path.parent, hashlib.sha256(data).hexdigest(), seed, dt)


def finite_or_none(x):
    """JSON-safe float."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None
