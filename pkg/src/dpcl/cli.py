"""Command-line entry points: train, eval, ablate, export-prototypes, generate."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, override, save_config
from .data import export_dataset
from .evaluation import (VARIANTS, ablation_table, evaluate, export_prototypes, format_table, run_cell)
from .trainer import CheckpointError, dataset_for, fit, init_train_state, load_checkpoint

log = logging.getLogger("dpcl")

OUT_ENV = "DPCL_OUT"


def _out_root(args, cfg: ExperimentConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(cfg.out_dir if cfg is not None else "runs")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    trainer = {}
    if getattr(args, "fold", None) is not None:
        trainer["fold"] = args.fold
    if getattr(args, "seed", None) is not None:
        trainer["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        trainer["max_iterations"] = args.iterations
    nce = {}
    if getattr(args, "no_cscl", False):
        nce["cscl"] = False
    if getattr(args, "no_cacl", False):
        nce["cacl"] = False
    return override(cfg, trainer=trainer, nce=nce)


def cmd_train(args) -> int:
    cfg = _load(args)
    run_dir = _out_root(args, cfg) / cfg.run_name / f"fold{cfg.trainer.fold}_seed{cfg.trainer.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = load_checkpoint(args.resume, cfg)
        log.info("resumed from %s at step %d", args.resume, state.step)
    else:
        state = init_train_state(cfg)
    save_config(cfg, run_dir / "config.yaml")
    reports = fit(state, log_path=run_dir / "train_log.csv", checkpoint_dir=run_dir / "checkpoints")
    last = reports[-1] if reports else None
    print(f"run_dir={run_dir} step={state.step} config_hash={cfg.hash()}")
    if last is not None:
        print(f"final seg={last.seg_loss} align={last.align_loss} cs={last.cs_loss} ca={last.ca_loss} "
              f"total={last.total}")
    return 0


def _fold_columns(rows, folds):
    return "fold  " + "  ".join(f"fold-{f + 1:<3}" for f in folds) + "   Mean"


def cmd_eval(args) -> int:
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    summary, per_class = [], []
    for path in args.checkpoint:
        state = load_checkpoint(path)
        cfg = load_config(args.config) if args.config else state.config
        if cfg.data != state.config.data:
            raise CheckpointError(f"data config differs from the one {path} was trained with")
        trained_fold = state.config.trainer.fold
        fold = trained_fold if args.fold is None else args.fold
        if fold != trained_fold:
            raise CheckpointError(f"{path} was trained on fold {trained_fold}; its test classes are fold "
                                  f"{trained_fold}'s, not fold {fold}'s")
        dataset = dataset_for(cfg)
        res = evaluate(state.encoder, cfg, fold=fold, num_episodes=args.episodes or cfg.eval.episodes,
                       seed=cfg.eval.seed if args.seed is None else args.seed, dataset=dataset)
        summary.append((fold, res.miou))
        for c, iou in sorted(res.per_class_iou.items()):
            per_class.append((fold, c, dataset.class_names[c], iou))
    with open(out / "eval_per_class.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "class_id", "class_name", "iou"])
        w.writerows(per_class)
    summary.sort()
    with open(out / "eval_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "miou"])
        w.writerows(summary)
        w.writerow(["mean", float(np.mean([m for _, m in summary]))])
    header = "  ".join(f"fold-{f + 1:>2}" for f, _ in summary) + "     Mean"
    values = "  ".join(f"{100 * m:7.2f}" for _, m in summary) + f"  {100 * np.mean([m for _, m in summary]):7.2f}"
    print(header)
    print(values)
    return 0


def _cell(job):
    cfg, fold, seed, variant, out = job
    return run_cell(cfg, fold, seed, variant, out_dir=out)


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = _out_root(args, cfg) / cfg.run_name / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    folds = args.folds if args.folds is not None else list(range(cfg.data.folds))
    variants = args.variants or list(VARIANTS)
    if len(args.seeds) < 3:
        log.warning("fewer than 3 seeds per cell")
    jobs = [(cfg, f, s, v, out / "cells") for f in folds for s in args.seeds for v in variants]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            cells = list(pool.map(_cell, jobs))
    else:
        cells = [_cell(j) for j in jobs]
    with open(out / "ablation_cells.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(asdict(cells[0])))
        w.writeheader()
        for c in cells:
            w.writerow(asdict(c))
    table = ablation_table(cells, cfg.data.folds, variants)
    cols = [f"fold-{f + 1}" for f in range(cfg.data.folds)] + ["mean"]
    with open(out / "ablation_table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "cscl", "cacl"] + [f"{c}_{k}" for c in cols for k in ("mean", "std", "n")])
        for row in table:
            cscl, cacl = VARIANTS[row["variant"]]
            vals = []
            for c in cols:
                vals.extend(row.get(c, ("", "", "")))
            w.writerow([row["variant"], int(cscl), int(cacl)] + vals)
    print(format_table(table, cfg.data.folds))
    rows = {r["variant"]: r for r in table}
    if "both" in rows and "neither" in rows:
        print(f"both vs neither: mean mIoU {100 * rows['both']['mean'][0]:.2f} vs "
              f"{100 * rows['neither']['mean'][0]:.2f} "
              f"(delta {100 * (rows['both']['mean'][0] - rows['neither']['mean'][0]):+.2f})")
    return 0


def cmd_export_prototypes(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config) if args.config else state.config
    out = _out_root(args)
    path = out / "prototypes.csv"
    n = export_prototypes(state.encoder, cfg, path, args.episodes, cfg.eval.seed if args.seed is None else args.seed)
    print(f"wrote {n} prototype rows to {path}")
    return 0


def cmd_generate(args) -> int:
    cfg = _load(args)
    out = _out_root(args, cfg)
    export_dataset(dataset_for(cfg), out)
    print(f"wrote dataset to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpcl", description="Dual prototypical contrastive few-shot segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one fold")
    t.add_argument("--config")
    t.add_argument("--resume")
    t.add_argument("--fold", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--no-cscl", action="store_true")
    t.add_argument("--no-cacl", action="store_true")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints on their unseen fold")
    e.add_argument("--checkpoint", nargs="+", required=True)
    e.add_argument("--config")
    e.add_argument("--fold", type=int)
    e.add_argument("--episodes", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="CSCL/CACL ablation over folds and seeds")
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--folds", type=int, nargs="+")
    a.add_argument("--variants", nargs="+", choices=list(VARIANTS))
    a.add_argument("--iterations", type=int)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-prototypes", help="dump unseen-class prototypes as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--config")
    x.add_argument("--episodes", type=int, default=50)
    x.add_argument("--seed", type=int)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_prototypes)

    g = sub.add_parser("generate", help="export the synthetic dataset as PNGs")
    g.add_argument("--config")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as err:
        print(f"dpcl: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
