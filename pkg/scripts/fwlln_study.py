"""Distance between the mean scaled DES path and the fluid path as n grows.

    python3 scripts/fwlln_study.py scenarios/overloaded.json --ns 250 500 1000 2000 --batches 20
"""

import argparse
import csv
import math

import numpy as np

from fluidq.des import replicate
from fluidq.elapsed import solve
from fluidq.scenario import load


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("scenario")
    ap.add_argument("--ns", type=int, nargs="+", default=[250, 500, 1000, 2000])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--batches", type=int, default=20)
    ap.add_argument("--T", type=float, default=10.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default="fwlln.csv")
    args = ap.parse_args()

    sc = load(args.scenario)
    tr = solve(sc.rate, sc.Gs, sc.Gr, sc.initial_condition(), sc.params)
    grid = np.linspace(0.0, args.T, 1001)
    fluid = {c: np.interp(grid, tr.t, getattr(tr, c)) for c in ("X", "B", "Q")}
    seeds = np.random.SeedSequence(args.seed).generate_state(args.batches)

    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "batch", "sup_X", "sup_B", "sup_Q"])
        for n in args.ns:
            d = []
            for b, s in enumerate(seeds):
                agg = replicate(n, sc.rate, sc.Gs, sc.Gr, args.T, args.reps, int(s) + n, tr.ic, grid, args.workers)
                sup = [float(np.max(np.abs(agg.mean[c] - fluid[c]))) for c in ("X", "B", "Q")]
                d.append(sup[0])
                w.writerow([n, b] + [f"{v:.12g}" for v in sup])
            d = np.asarray(d)
            print(f"n={n}: mean sup|X| {d.mean():.4f} +- {d.std(ddof=1) / math.sqrt(d.size):.4f}, "
                  f"sqrt(n) * mean {math.sqrt(n) * d.mean():.3f}")


if __name__ == "__main__":
    main()
