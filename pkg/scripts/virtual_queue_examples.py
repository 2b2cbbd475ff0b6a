"""Conversions between the elapsed-time and virtual-queue models on the initial-layer examples.

    python3 scripts/virtual_queue_examples.py --out vq
"""

import argparse
import json
from pathlib import Path

import numpy as np

from fluidq.arrivals import ArrivalRate
from fluidq.distributions import Exponential, Uniform, Weibull
from fluidq.elapsed import InitialCondition, SolverParams, solve
from fluidq.measures import GridMeasure
from fluidq.zhang import (ZhangInitial, check_density_condition, con4_eta0, solve_zhang, zhang_from_zuniga,
                          zuniga_from_zhang)


def layer(lam, Gr, a, dt, scale=1.0):
    eta = con4_eta0(lam * scale, Gr, a, dt)
    nu = GridMeasure.from_cell_masses(GridMeasure.uniform_grid(dt, 1.0), np.full(int(round(1 / dt)), dt))
    return InitialCondition(eta, nu, 1.0 + eta.total_mass)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--T", type=float, default=10.0)
    ap.add_argument("--out", default="vq")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lam, a, Gs = 1.5, 0.5, Exponential(1.0)
    p = SolverParams(dt=args.dt, T=args.T)
    summary = {}

    for name, Gr in (("uniform", Uniform(0.0, 2.0)), ("weibull", Weibull(2.0, 1.0))):
        ic = layer(lam, Gr, a, args.dt)
        tr = solve(ArrivalRate.constant(lam), Gs, Gr, ic, p)
        zt = solve_zhang(lam, Gs, Gr, ZhangInitial.from_nu0(ic.nu0, Gs, lam * a), p)
        zt.to_csv(out / f"zhang_{name}.csv")
        tr.to_csv(out / f"elapsed_{name}.csv")
        dev = {c: float(np.max(np.abs(getattr(zt, c) - getattr(tr, c)))) for c in ("Q", "B", "X", "K", "R")}

        bad = solve(ArrivalRate.constant(lam), Gs, Gr, layer(lam, Gr, a, args.dt, 1.5), p)
        res = zhang_from_zuniga(bad)
        dens = check_density_condition(bad.ic.eta0, Gr, lam, bad, bad.t[:200:10], tol=1e-3)
        summary[name] = {"max_deviation": dev, "scaled_layer_feasible": res.feasible,
                         "certificate": res.certificate, "density_form_max_spread": dens["max_spread"]}

    tail = lambda x: np.clip(1.0 - np.asarray(x, dtype=float) / 2.0, 0.0, None)
    zt = solve_zhang(lam, Gs, Uniform(0.0, 2.0), ZhangInitial(0.0, tail), SolverParams(dt=args.dt, T=5.0))
    summary["non_exponential_tail"] = zuniga_from_zhang(zt).to_json()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    print(json.dumps(summary, indent=2, default=float))


if __name__ == "__main__":
    main()
