"""Grid refinement study: balance, Whitt-clause and coupling residuals versus dt.

    python3 scripts/convergence_study.py scenarios/layer_feasible.json --dts 4e-3 2e-3 1e-3 --out conv.csv
"""

import argparse
import csv
import math

from fluidq.elapsed import solve
from fluidq.residual import check_coupling
from fluidq.scenario import load
from fluidq.two_param import check_whitt


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("scenario")
    ap.add_argument("--dts", type=float, nargs="+", default=[4e-3, 2e-3, 1e-3])
    ap.add_argument("--out", default="convergence.csv")
    args = ap.parse_args()

    rows = []
    for dt in sorted(args.dts, reverse=True):
        sc = load(args.scenario, dt=dt)
        tr = solve(sc.rate, sc.Gs, sc.Gr, sc.initial_condition(), sc.params)
        bal = tr.balance_residuals()
        whitt = check_whitt(tr).residuals if sc.Gs.has_density and sc.Gr.has_density else {}
        row = {"dt": dt, "balance": max(bal["total"], bal["queue"], bal["server"]),
               "coupling": check_coupling(tr).max_residual, **whitt}
        rows.append(row)
        print(", ".join(f"{k}={v:.3e}" for k, v in row.items()))

    for prev, cur in zip(rows, rows[1:]):
        orders = {k: math.log2(prev[k] / cur[k]) for k in cur if k != "dt" and cur[k] > 0 and prev[k] > 0}
        print(f"order {prev['dt']:g} -> {cur['dt']:g}: " + ", ".join(f"{k}={v:.2f}" for k, v in orders.items()))

    keys = sorted({k for r in rows for k in r})
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([f"{r[k]:.12g}" if k in r else "" for k in keys])


if __name__ == "__main__":
    main()
