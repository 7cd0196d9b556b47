"""End-to-end drive of the 2-D benchmark world.

Trains the attribute classifiers, then exercises every sampling mode through
the CLI: plain conditional sampling with each sampler, uniform-target
controllability evaluation, OR / NOT compositions, and a three-stage
sequential edit. All outputs land under --out-dir in the same layout the
individual commands produce.

    python scripts/run_benchmark.py --out-dir runs/bench
"""

import argparse
import sys

from lace.cli import main as lace


def run(argv):
    print("+ lace " + " ".join(argv), flush=True)
    rc = lace(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description="train + sample + compose + edit on the benchmark world")
    ap.add_argument("--out-dir", default="runs/bench")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--chains", type=int, default=5000)
    args = ap.parse_args()
    out = args.out_dir
    seed = str(args.seed)
    chains = str(args.chains)

    run(["train", "--out-dir", f"{out}/train", "--seed", seed])
    ck = f"{out}/train/checkpoint.json"

    for kind in ("ld", "ode", "pc"):
        run([
            "sample", "--checkpoint", ck, "--expr", "AND(attr0=1, attr1=3)",
            "--sampler", kind, "--chains", chains, "--seed", seed,
            "--out-dir", f"{out}/sample_{kind}",
        ])

    run([
        "eval", "--checkpoint", ck, "--sampler", "ode", "--count", chains,
        "--seed", seed, "--out-dir", f"{out}/eval_ode",
    ])

    run([
        "sample", "--checkpoint", ck, "--expr", "OR(attr0=1, attr1=2; beta=ln 20)",
        "--sampler", "ode", "--chains", chains, "--seed", seed,
        "--out-dir", f"{out}/compose_or",
    ])
    run([
        "sample", "--checkpoint", ck, "--expr", "NOT(attr0=1, attr1=3)",
        "--sampler", "ode", "--chains", chains, "--seed", seed,
        "--out-dir", f"{out}/compose_not",
    ])

    run([
        "edit", "--checkpoint", ck, "--edits", "attr0=1,attr1=3,attr2=0.9",
        "--sampler", "ld", "--chains", chains, "--seed", seed,
        "--out-dir", f"{out}/edit",
    ])

    print(f"done; outputs under {out}/")


if __name__ == "__main__":
    main()
