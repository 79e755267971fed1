"""Segmentation loss curve when training repeatedly on one fixed episode."""
import argparse

import numpy as np

from dpcl.config import ExperimentConfig, load_config, override
from dpcl.data import sample_episode, split_folds
from dpcl.trainer import dataset_for, init_train_state, train_step


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    base = load_config(args.config) if args.config else ExperimentConfig()

    for seed in args.seeds:
        cfg = override(base, trainer={"seed": seed})
        ds = dataset_for(cfg)
        split = split_folds(ds.class_ids, cfg.data.folds, cfg.trainer.fold)
        episode = sample_episode(ds, split.train_classes, cfg.data.way, cfg.data.shot, np.random.default_rng(seed))
        state = init_train_state(cfg)
        curve = [train_step(state, [episode]).seg_loss for _ in range(args.steps)]
        marks = [0, args.steps // 4, args.steps // 2, args.steps - 1]
        print(f"seed {seed}: " + "  ".join(f"step {k + 1}: {curve[k]:.4f}" for k in marks)
              + f"  drop {1 - curve[-1] / curve[0]:.1%}")


if __name__ == "__main__":
    main()
