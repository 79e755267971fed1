"""CSCL/CACL ablation table (neither / cscl / cacl / both) across folds and seeds.

Thin wrapper around ``dpcl ablate`` with more seeds by default.

    python scripts/run_ablation.py --config configs/default.yaml --jobs 4
"""
import sys

from dpcl.cli import main

if __name__ == "__main__":
    argv = sys.argv[1:]
    if "--seeds" not in argv:
        argv += ["--seeds", "0", "1", "2", "3", "4"]
    sys.exit(main(["ablate"] + argv))
