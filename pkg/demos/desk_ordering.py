"""Naive vs replay vs I-DARTS vs I-DARTS* on the small synthetic RF problem.

Eight modulation classes arrive two at a time. All four strategies search
a two-cell supernet per task; they differ in how they protect old classes.
Prints final all-class accuracy per seed and the mean |alpha| after each
task, and writes the alpha histograms next to the script's output dir.

    python demos/desk_ordering.py --seeds 0 1 --out runs/desk
"""

import argparse
from pathlib import Path

import numpy as np

from idarts.config import write_outputs
from idarts.desk import DESK_STRATEGIES, run_desk, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--strategies", nargs="+", default=list(DESK_STRATEGIES), choices=list(DESK_STRATEGIES))
    ap.add_argument("--out", type=Path, default=None, help="write each run's metrics and alpha tables here")
    args = ap.parse_args()

    runs = run_desk(args.seeds, args.strategies, log=print)

    print(f"\n{'strategy':12s} " + " ".join(f"seed{s:<3d}" for s in args.seeds) + "  mean")
    for name in args.strategies:
        accs = [summarize(runs[name, s])["final_accuracy"] for s in args.seeds]
        print(f"{name:12s} " + " ".join(f"{a:7.4f}" for a in accs) + f"  {np.mean(accs):.4f}")

    print("\nmean |alpha| after each task")
    for (name, s), lr in sorted(runs.items()):
        drift = summarize(lr)["alpha_drift"]
        print(f"{name:12s} seed {s}: " + "  ".join(f"{drift[k]:.4f}" for k in sorted(drift)))

    if args.out:
        for (name, s), lr in runs.items():
            d = args.out / f"{name}-seed{s}"
            d.mkdir(parents=True, exist_ok=True)
            write_outputs(lr, d)
        print(f"\nrun directories written under {args.out}")


if __name__ == "__main__":
    main()
