"""Few-shot evaluation, prototype export and fold/seed experiment grids."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, override
from .data import SyntheticDataset, downsample_mask, sample_episode, split_folds
from .encoder import Encoder, to_tensor
from .matcher import SegmentationResult, class_probability_map, mean_iou, predict_mask
from .prototype import build_prototype_set
from .trainer import dataset_for, fit, init_train_state


@torch.no_grad()
def predict_episode(encoder: Encoder, episode, alpha: float):
    """Predicted label map at feature resolution plus the prototype set."""
    dtype = next(encoder.parameters()).dtype
    s_imgs, s_masks = episode.flat_supports()
    feats = encoder(to_tensor(np.concatenate([s_imgs, episode.query_image[None]]), dtype))
    size = tuple(feats.shape[-2:])
    protos = build_prototype_set(feats[:-1], downsample_mask(s_masks, size), episode.classes)
    prob = class_probability_map(feats[-1], protos, alpha)
    return predict_mask(prob), protos


def sample_test_episodes(dataset: SyntheticDataset, classes, way: int, shot: int, count: int, seed: int):
    rng = np.random.default_rng(seed)
    return [sample_episode(dataset, classes, way, shot, rng) for _ in range(count)]


def evaluate(encoder: Encoder, cfg: ExperimentConfig, fold: int | None = None, num_episodes: int | None = None,
             seed: int | None = None, dataset: SyntheticDataset | None = None) -> SegmentationResult:
    """mIoU over test-fold (unseen) classes; episodes are a function of ``seed`` only."""
    dataset = dataset or dataset_for(cfg)
    fold = cfg.trainer.fold if fold is None else fold
    split = split_folds(dataset.class_ids, cfg.data.folds, fold)
    episodes = sample_test_episodes(dataset, split.test_classes, cfg.data.way, cfg.data.shot,
                             cfg.eval.episodes if num_episodes is None else num_episodes,
                             cfg.eval.seed if seed is None else seed)
    preds, gts = [], []
    for ep in episodes:
        pred, _ = predict_episode(encoder, ep, cfg.trainer.alpha)
        preds.append(pred)
        gts.append(ep.query_mask)
    return mean_iou(preds, gts, split.test_classes)


@torch.no_grad()
def export_prototypes(encoder: Encoder, cfg: ExperimentConfig, path, num_episodes: int, seed: int,
                      fold: int | None = None, dataset: SyntheticDataset | None = None) -> int:
    """Write unseen-class prototypes as CSV rows ``label, source, v_1..v_D``.

    Support prototypes (foreground and background) are written for every
    episode, plus query-side foreground prototypes pooled with the true mask.
    Returns the number of rows written.
    """
    dataset = dataset or dataset_for(cfg)
    fold = cfg.trainer.fold if fold is None else fold
    split = split_folds(dataset.class_ids, cfg.data.folds, fold)
    episodes = sample_test_episodes(dataset, split.test_classes, cfg.data.way, cfg.data.shot, num_episodes, seed)
    dtype = next(encoder.parameters()).dtype
    rows = []
    for ep in episodes:
        _, protos = predict_episode(encoder, ep, cfg.trainer.alpha)
        for label, vec in zip(protos.labels, protos.vectors):
            rows.append([label, "support", *vec.tolist()])
        qf = encoder(to_tensor(ep.query_image[None], dtype))[0]
        q_lab = downsample_mask(ep.query_mask, tuple(qf.shape[-2:]))
        for c in ep.classes:
            m = torch.from_numpy((q_lab == c).astype(np.float64)).to(dtype)
            if m.sum() > 0:
                rows.append([c, "query", *((qf * m).sum((-2, -1)) / m.sum()).tolist()])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = encoder.out_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "source"] + [f"v{i}" for i in range(dim)])
        for r in rows:
            w.writerow([r[0], r[1]] + [repr(float(x)) for x in r[2:]])
    return len(rows)


@dataclass
class CellResult:
    fold: int
    seed: int
    variant: str
    miou: float
    init_miou: float
    final_seg_loss: float


VARIANTS = {
    "neither": (False, False),
    "cacl": (False, True),
    "cscl": (True, False),
    "both": (True, True),
}


def cell_config(cfg: ExperimentConfig, fold: int, seed: int, variant: str) -> ExperimentConfig:
    cscl, cacl = VARIANTS[variant]
    return override(cfg, trainer={"fold": fold, "seed": seed}, nce={"cscl": cscl, "cacl": cacl})


def run_cell(cfg: ExperimentConfig, fold: int, seed: int, variant: str = "both", out_dir=None) -> CellResult:
    """Train one (fold, seed, loss variant) cell and evaluate it on unseen classes."""
    cell = cell_config(cfg, fold, seed, variant)
    dataset = dataset_for(cell)
    state = init_train_state(cell)
    init_res = evaluate(state.encoder, cell, dataset=dataset)
    log_path = ckpt = None
    if out_dir is not None:
        base = Path(out_dir) / f"{variant}_fold{fold}_seed{seed}"
        log_path, ckpt = base / "train_log.csv", base
    reports = fit(state, dataset, log_path=log_path, checkpoint_dir=ckpt)
    res = evaluate(state.encoder, cell, dataset=dataset)
    tail = [r.seg_loss for r in reports[-50:] if r.seg_loss is not None]
    return CellResult(fold, seed, variant, res.miou, init_res.miou, float(np.mean(tail)) if tail else float("nan"))


def ablation_table(cells: list[CellResult], folds: int, variants=tuple(VARIANTS)) -> list[dict]:
    """Rows of mean/std mIoU per fold plus the mean over folds, per variant."""
    table = []
    for v in variants:
        row = {"variant": v}
        fold_means = []
        for f in range(folds):
            vals = [c.miou for c in cells if c.variant == v and c.fold == f]
            if not vals:
                continue
            row[f"fold-{f + 1}"] = (float(np.mean(vals)), float(np.std(vals)), len(vals))
            fold_means.append(np.mean(vals))
        if fold_means:
            per_seed = {}
            for c in cells:
                if c.variant == v:
                    per_seed.setdefault(c.seed, []).append(c.miou)
            seed_means = [np.mean(x) for x in per_seed.values()]
            row["mean"] = (float(np.mean(fold_means)), float(np.std(seed_means)), len(seed_means))
            table.append(row)
    return table


def format_table(table: list[dict], folds: int) -> str:
    cols = [f"fold-{f + 1}" for f in range(folds)] + ["mean"]
    lines = ["variant  " + "  ".join(f"{c:>15}" for c in cols)]
    for row in table:
        cells = []
        for c in cols:
            m = row.get(c)
            cells.append(f"{'-':>15}" if m is None else f"{100 * m[0]:7.2f}±{100 * m[1]:5.2f} ")
        lines.append(f"{row['variant']:<8} " + "  ".join(cells))
    return "\n".join(lines)
