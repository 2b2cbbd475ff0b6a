"""Command line entry point.

    fluidq run <scenario.json> [--out DIR] [--seed N] [--dt X] [--quiet]
    fluidq compare <a.csv> <b.csv> --cols Q,B,X --tol 1e-3

Exit codes: 0 all checks pass, 2 a check failed, 1 bad configuration or input.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .des import replicate
from .elapsed import Trajectory, solve, validate_initial
from .errors import ConfigError, StepFailureError, UnsupportedModelError
from .residual import check_coupling
from .scenario import Scenario, finite_or_none, load
from .two_param import check_whitt
from .zhang import ZhangInitial, solve_zhang, zhang_from_zuniga, zuniga_from_zhang

EXIT_OK, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2


class TaskRunner:
    """Runs a scenario's tasks in dependency order and writes one report per task."""

    def __init__(self, sc: Scenario, out: Path, quiet: bool = False):
        self.sc, self.out, self.quiet = sc, out, quiet
        self.traj: Trajectory | None = None
        self.results: dict[str, bool] = {}

    def _report(self, task: str, passed: bool, metrics: dict, extra: dict | None = None) -> None:
        body = {"task": task, "scenario": self.sc.name, "scenario_sha256": self.sc.sha256,
                "version": __version__, "passed": bool(passed), "metrics": metrics,
                "tolerances": self.sc.tolerances}
        if extra:
            body.update(extra)
        (self.out / f"{task}.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        self.results[task] = bool(passed)
        if not self.quiet:
            print(f"{task:16s} {'PASS' if passed else 'FAIL'}")

    def run(self) -> int:
        self.out.mkdir(parents=True, exist_ok=True)
        for task in self.sc.tasks:
            getattr(self, task)()
        return EXIT_OK if all(self.results.values()) else EXIT_CHECK

    # -- tasks --
    def solve_elapsed(self) -> None:
        sc, tol = self.sc, self.sc.tolerances
        ic = sc.initial_condition()
        admissible = validate_initial(ic)
        if not admissible:
            raise ConfigError(f"inadmissible initial condition: {admissible.violations}")
        traj = solve(sc.rate, sc.Gs, sc.Gr, ic, sc.params)
        self.traj = traj
        traj.to_csv(self.out / "elapsed.csv")
        bal = traj.balance_residuals()
        D80, Dm = traj.departure_process()
        R8, Rm = traj.abandonment_process()
        dual = float(np.max(np.abs(R8 - Rm) / (1 + Rm)))
        if D80 is not None:
            dual = max(dual, float(np.max(np.abs(D80 - Dm) / (1 + Dm))))
        metrics = {k: float(v) for k, v in bal.items()}
        metrics["dual"] = dual
        metrics["flagged_steps"] = int(traj.flags.sum())
        passed = (max(bal["total"], bal["queue"], bal["server"], bal["non_idling"]) <= tol["balance"]
                  and bal["k_monotone"] >= -tol["monotone"] and bal["chi_lipschitz"] <= tol["monotone"]
                  and dual <= tol["dual"])
        self._report("solve_elapsed", passed, metrics, {"outputs": ["elapsed.csv"]})

    def whitt_check(self) -> None:
        rep = check_whitt(self.traj)
        self._report("whitt_check", rep.max_residual <= self.sc.tolerances["whitt"],
                     {"residuals": rep.residuals, "samples": rep.samples, "max_residual": rep.max_residual})

    def residual_check(self) -> None:
        rep = check_coupling(self.traj)
        rep.to_csv(self.out / "coupling.csv")
        self._report("residual_check", rep.max_residual <= self.sc.tolerances["coupling"],
                     {"max_residual": rep.max_residual, "nu": float(np.max(rep.nu_residual)),
                      "eta": float(np.max(rep.eta_residual))}, {"outputs": ["coupling.csv"]})

    def _zhang_initial(self) -> ZhangInitial:
        spec, sc = self.sc.initial, self.sc
        kind = spec.get("kind", "empty")
        if kind == "empty":
            return ZhangInitial.empty()
        if kind == "layer" and float(spec.get("scale", 1.0)) == 1.0:
            ic = sc.initial_condition()
            return ZhangInitial.from_nu0(ic.nu0, sc.Gs, float(sc.rate(0.0)) * float(spec.get("a", 0.0)))
        raise ConfigError("zhang_solve needs an empty initial condition or an unscaled layer")

    def zhang_solve(self) -> None:
        sc, tol = self.sc, self.sc.tolerances
        zt = solve_zhang(sc.rate, sc.Gs, sc.Gr, self._zhang_initial(), sc.params)
        zt.to_csv(self.out / "zhang.csv")
        metrics = {"balance": zt.balance_residual(), "q_qv": zt.qqv_residual(),
                   "entry_representation": float(np.max(np.abs(zt.entry_representation() - zt.K)))}
        passed = metrics["balance"] <= tol["zhang_balance"]
        if self.traj is not None:
            n = min(zt.t.size, self.traj.filled + 1)
            dev = {c: float(np.max(np.abs(getattr(zt, c)[:n] - getattr(self.traj, c)[:n])))
                   for c in ("Q", "B", "X", "K", "R")}
            metrics["vs_elapsed"] = dev
            passed = passed and max(dev.values()) <= tol["zhang_vs_elapsed"]
        self._report("zhang_solve", passed, metrics, {"outputs": ["zhang.csv"]})

    def zhang_roundtrip(self) -> None:
        sc = self.sc
        want = sc.expect.get("zhang_roundtrip", "feasible")
        res = zhang_from_zuniga(self.traj)
        extra = {"expect": want}
        metrics = {"max_spread": finite_or_none(np.max(res.spread)) if res.spread.size else 0.0,
                   "r_identity": finite_or_none(res.r_identity)}
        if res.feasible:
            zt = res.trajectory
            zt.to_csv(self.out / "zhang_from_elapsed.csv")
            back = zuniga_from_zhang(zt, params=sc.params)
            extra["outputs"] = ["zhang_from_elapsed.csv"]
            extra["outcome"] = "feasible"
            metrics["q_qv"] = zt.qqv_residual()
            metrics["back"] = back.to_json()
            dev = max(back.deviations.values()) if back.feasible else float("inf")
            passed = want == "feasible" and back.feasible and dev <= sc.tolerances["roundtrip"]
        else:
            extra["outcome"] = "infeasible: expected" if want == "infeasible" else "infeasible: unexpected"
            extra["certificate"] = res.certificate
            passed = want == "infeasible"
        self._report("zhang_roundtrip", passed, metrics, extra)

    def des_validate(self) -> None:
        sc, d = self.sc, self.sc.des
        T = min(d.T, self.traj.t[self.traj.filled])
        grid = np.linspace(0.0, T, d.grid_points)
        agg = replicate(d.n, sc.rate, sc.Gs, sc.Gr, T, d.reps, sc.seed, self.traj.ic, grid)
        agg.to_csv(self.out / "des.csv")
        n = self.traj.filled + 1
        sup = {c: float(np.max(np.abs(agg.mean[c] - np.interp(grid, self.traj.t[:n], getattr(self.traj, c)[:n]))))
               for c in ("X", "B", "Q")}
        self._report("des_validate", max(sup.values()) <= sc.tolerances["des_sup"],
                     {"sup": sup, "n": d.n, "reps": d.reps, "seed": sc.seed}, {"outputs": ["des.csv"]})


def _out_dir(sc: Scenario, arg: str | None) -> Path:
    if arg:
        return Path(arg)
    if sc.output is not None:
        return sc.output if sc.output.is_absolute() else sc.base_dir / sc.output
    return Path("out") / sc.name


def cmd_run(args) -> int:
    sc = load(args.scenario, seed=args.seed, dt=args.dt)
    return TaskRunner(sc, _out_dir(sc, args.out), args.quiet).run()


def read_csv(path: str | Path) -> dict[str, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(line for line in fh if not line.startswith("#")) if r]
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if len(rows) < 2:
        raise ConfigError(f"{path} has no data rows")
    head = rows[0]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data.shape[1] != len(head):
        raise ConfigError(f"{path}: rows do not match the header")
    return {h: data[:, i] for i, h in enumerate(head)}


def compare_tables(a: dict, b: dict, cols, tol: float) -> dict:
    """Sup and L1 distance per column on the overlap of the two time ranges, on a's grid."""
    for name, tab in (("first", a), ("second", b)):
        missing = [c for c in ("t", *cols) if c not in tab]
        if missing:
            raise ConfigError(f"{name} file lacks columns {missing}")
    lo, hi = max(a["t"][0], b["t"][0]), min(a["t"][-1], b["t"][-1])
    if hi <= lo:
        raise ConfigError("the time ranges do not overlap")
    keep = (a["t"] >= lo) & (a["t"] <= hi)
    t = a["t"][keep]
    out = {}
    for c in cols:
        diff = np.abs(a[c][keep] - np.interp(t, b["t"], b[c]))
        l1 = float(np.sum(0.5 * (diff[1:] + diff[:-1]) * np.diff(t))) if t.size > 1 else 0.0
        out[c] = {"sup": float(np.max(diff)), "l1": l1}
    return {"columns": out, "t_range": [float(lo), float(hi)], "tol": tol, "version": __version__,
            "passed": all(v["sup"] <= tol for v in out.values())}


def cmd_compare(args) -> int:
    cols = [c.strip() for c in args.cols.split(",") if c.strip()]
    if not cols:
        raise ConfigError("--cols is empty")
    rep = compare_tables(read_csv(args.a), read_csv(args.b), cols, args.tol)
    print(json.dumps(rep, indent=2, sort_keys=True))
    return EXIT_OK if rep["passed"] else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fluidq", description="Many-server fluid queue models.")
    p.add_argument("--version", action="version", version=f"fluidq {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run the tasks of a scenario file")
    r.add_argument("scenario")
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--dt", type=float)
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_run)
    c = sub.add_parser("compare", help="compare two trajectory CSVs")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--cols", default="Q,B,X")
    c.add_argument("--tol", type=float, default=1e-3)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UnsupportedModelError as exc:
        print(f"unsupported-model: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StepFailureError as exc:
        print(f"step failure: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
