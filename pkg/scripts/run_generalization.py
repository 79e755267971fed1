"""Trained-vs-untrained mIoU on unseen classes for every fold and seed.

    python scripts/run_generalization.py --config configs/default.yaml --seeds 0 1 2 3 4 --out runs/gen
"""
import argparse
import csv
import time
from pathlib import Path

import numpy as np

from dpcl.config import ExperimentConfig, load_config
from dpcl.evaluation import VARIANTS, run_cell


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--folds", type=int, nargs="+")
    p.add_argument("--variant", default="both", choices=list(VARIANTS))
    p.add_argument("--out", default="runs/generalization")
    args = p.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    folds = args.folds if args.folds is not None else list(range(cfg.data.folds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for fold in folds:
        for seed in args.seeds:
            t0 = time.time()
            r = run_cell(cfg, fold, seed, args.variant)
            dt = time.time() - t0
            rows.append((fold, seed, r.init_miou, r.miou, r.miou - r.init_miou, dt))
            print(f"fold-{fold + 1} seed {seed}: init {r.init_miou:.3f} -> trained {r.miou:.3f} "
                  f"(gain {r.miou - r.init_miou:+.3f}, {dt:.0f}s)", flush=True)

    with open(out / "generalization.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "seed", "init_miou", "miou", "gain", "seconds"])
        w.writerows(rows)
    gains = np.array([r[4] for r in rows])
    print(f"gain: mean {gains.mean():.3f}, min {gains.min():.3f} over {len(rows)} runs")


if __name__ == "__main__":
    main()
