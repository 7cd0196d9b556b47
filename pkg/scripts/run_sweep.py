"""Hyperparameter sweeps for both samplers on a single binary leaf.

Runs the full ODE tolerance grid (81 settings) and the LD grid (104 settings
after dropping noise/step collisions) against a trained checkpoint, then
prints the efficiency/robustness summary: minimum mean NFE among rows with
ACC >= 0.95 and TV <= 0.1, and the interquartile range of ACC across each
grid.

    python scripts/run_sweep.py --checkpoint runs/bench/train/checkpoint.json
"""

import argparse
import csv
import sys

import numpy as np

from lace.cli import main as lace


def run(argv):
    print("+ lace " + " ".join(argv), flush=True)
    rc = lace(argv)
    if rc != 0:
        sys.exit(rc)


def load_rows(path):
    with open(path, newline="") as fh:
        return [row for row in csv.DictReader(fh)]


def summarize(name, rows, cost_key):
    acc = np.array([float(r["acc"]) for r in rows if not r["error"]])
    good = [
        r for r in rows
        if not r["error"] and float(r["acc"]) >= 0.95 and float(r["tv"]) <= 0.1
    ]
    q1, q3 = np.percentile(acc, [25, 75])
    print(f"{name}: {len(rows)} rows, ACC IQR {q3 - q1:.4f}")
    if good:
        best = min(good, key=lambda r: float(r[cost_key]))
        print(f"  qualifying rows (ACC>=0.95, TV<=0.1): {len(good)}, "
              f"min {cost_key} {float(best[cost_key]):.1f}")
    else:
        print("  qualifying rows (ACC>=0.95, TV<=0.1): none")
    return good


def main():
    ap = argparse.ArgumentParser(description="run both sampler grids and summarize")
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--expr", default="attr0=1")
    ap.add_argument("--chains", type=int, default=2000)
    ap.add_argument("--coarsen", type=int, default=8)
    ap.add_argument("--out-dir", default="runs/sweep")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    for kind in ("ode", "ld"):
        run([
            "sweep", "--checkpoint", args.checkpoint, "--expr", args.expr,
            "--grid", kind, "--chains", str(args.chains),
            "--coarsen", str(args.coarsen), "--seed", str(args.seed),
            "--out-dir", f"{args.out_dir}/{kind}",
        ])

    ode = load_rows(f"{args.out_dir}/ode/sweep.csv")
    ld = load_rows(f"{args.out_dir}/ld/sweep.csv")
    good_ode = summarize("ode", ode, "nfe_mean")
    good_ld = summarize("ld", ld, "n_steps")
    if good_ode and good_ld:
        a = min(float(r["nfe_mean"]) for r in good_ode)
        b = min(float(r["n_steps"]) for r in good_ld)
        print(f"min ODE NFE / min LD steps = {a:.1f} / {b:.0f} = {a / b:.2f}")


if __name__ == "__main__":
    main()
