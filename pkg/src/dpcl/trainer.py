"""Training engine: episode losses, SGD, momentum update, checkpoints."""
from __future__ import annotations

import csv
import functools
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import DataConfig, ExperimentConfig, config_from_dict
from .contrastive import PrototypeDictionary, ca_nce_loss, cs_nce_loss
from .data import (SyntheticDataset, augment, downsample_mask, generate_synthetic_dataset, sample_episode,
                   split_folds)
from .encoder import (Encoder, NonFiniteError, build_encoder, gradients, init_momentum_encoder, momentum_update,
                      to_tensor)
from .matcher import class_logits
from .prototype import DegenerateMaskError, build_prototype_set

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dpcl-checkpoint-v1"
IGNORE = -100


class CheckpointError(RuntimeError):
    pass


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


@dataclass
class LossReport:
    step: int
    seg_loss: float | None
    align_loss: float | None
    cs_loss: float | None
    ca_loss: float | None
    total: float
    lr: float = 0.0

    def row(self) -> dict:
        return {
            "step": self.step,
            "seg_loss": self.seg_loss,
            "align_loss": self.align_loss,
            "cs_loss": self.cs_loss,
            "ca_loss": self.ca_loss,
            "total": self.total,
            "cs_skipped": int(self.cs_loss is None),
            "ca_skipped": int(self.ca_loss is None),
            "lr": self.lr,
        }


@dataclass
class EpisodeLosses:
    seg: torch.Tensor | None
    align: torch.Tensor | None
    cs: torch.Tensor | None
    ca: torch.Tensor | None
    pushes: list = field(default_factory=list)


@dataclass
class TrainState:
    config: ExperimentConfig
    encoder: Encoder
    momentum_encoder: Encoder
    buffers: list[torch.Tensor]
    dictionary: PrototypeDictionary
    rng: np.random.Generator
    step: int = 0


def init_train_state(cfg: ExperimentConfig) -> TrainState:
    """Fresh parameters, ``theta_m <- theta`` and a random-filled dictionary."""
    dtype = torch_dtype(cfg.trainer.dtype)
    rng = np.random.default_rng(cfg.trainer.seed)
    encoder = build_encoder(cfg.encoder, rng, dtype)
    twin = init_momentum_encoder(encoder)
    dictionary = PrototypeDictionary.init_random(cfg.dictionary.capacity, encoder.out_dim, rng, dtype)
    buffers = [torch.zeros_like(p) for p in encoder.parameters()]
    return TrainState(cfg, encoder, twin, buffers, dictionary, rng)


def _pixel_ce(logits: torch.Tensor, labels: np.ndarray, class_order) -> torch.Tensor | None:
    target = np.full(labels.shape, IGNORE, dtype=np.int64)
    for i, label in enumerate(class_order):
        target[labels == label] = i
    if not (target != IGNORE).any():
        return None
    return F.cross_entropy(logits[None], torch.from_numpy(target)[None], ignore_index=IGNORE)


def _match_resolution(logits: torch.Tensor, size) -> torch.Tensor:
    if tuple(logits.shape[-2:]) == tuple(size):
        return logits
    return F.interpolate(logits[None], size=tuple(size), mode="bilinear", align_corners=False)[0]


def segmentation_loss(support_features, support_labels, query_features, query_labels, classes, alpha: float,
                      align: bool = True, image_labels=None):
    """Query cross-entropy plus the reverse (alignment) cross-entropy.

    Labels are integer class maps at feature resolution. The alignment
    direction builds prototypes from the query's features with its true mask
    and segments every support. With ``image_labels=(support, query)`` at
    full resolution, logits are bilinearly upsampled before the loss.
    Returns ``(seg_loss, align_loss, prototypes)``; a term is ``None`` when
    its masks are degenerate.
    """
    s_full, q_full = image_labels if image_labels is not None else (support_labels, query_labels)
    prototypes = build_prototype_set(support_features, support_labels, classes)
    logits = _match_resolution(class_logits(query_features, prototypes, alpha), q_full.shape)
    seg = _pixel_ce(logits, q_full, prototypes.labels)
    align_loss = None
    if align:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                q_protos = build_prototype_set(query_features[None], query_labels[None], classes)
            except DegenerateMaskError:
                q_protos = None
        if q_protos is not None and len(q_protos) > 1:
            terms = []
            for f, lab in zip(support_features, s_full):
                lg = _match_resolution(class_logits(f, q_protos, alpha), lab.shape)
                t = _pixel_ce(lg, lab, q_protos.labels)
                if t is not None:
                    terms.append(t)
            if terms:
                align_loss = torch.stack(terms).mean()
        else:
            log.debug("alignment term skipped: query prototypes degenerate")
    return seg, align_loss, prototypes


def total_loss(seg, align, cs, ca, lambda_cs: float, lambda_ca: float):
    """``seg (+ align) + lambda_cs * cs + lambda_ca * ca``; ``None`` terms are omitted."""
    terms = []
    for value, weight in ((seg, 1.0), (align, 1.0), (cs, lambda_cs), (ca, lambda_ca)):
        if value is None:
            continue
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NonFiniteError(f"non-finite loss term {float(torch.as_tensor(value).detach())}")
        terms.append(weight * value)
    if not terms:
        return torch.zeros(())
    return functools.reduce(lambda a, b: a + b, terms)


@torch.no_grad()
def sgd_step(params, grads, buffers, lr: float, momentum: float, weight_decay: float):
    """In place: ``g += wd * theta; buf = momentum * buf + g; theta -= lr * buf``."""
    params, grads, buffers = list(params), list(grads), list(buffers)
    for g in grads:
        if not torch.isfinite(g).all():
            raise NonFiniteError("non-finite gradient")
    for p, g, buf in zip(params, grads, buffers):
        d = g + weight_decay * p if weight_decay else g
        buf.mul_(momentum).add_(d)
        p.sub_(lr * buf)
    return params, buffers


def episode_losses(encoder: Encoder, momentum_encoder: Encoder, dictionary: PrototypeDictionary, episode,
                   cfg: ExperimentConfig, rng: np.random.Generator) -> EpisodeLosses:
    """All loss terms for one episode; the dictionary is only read.

    Dictionary pushes are returned in ``pushes`` for the caller to apply.
    """
    dtype = next(encoder.parameters()).dtype
    s_imgs, s_masks = episode.flat_supports()
    feats = encoder(to_tensor(np.concatenate([s_imgs, episode.query_image[None]]), dtype))
    sf, qf = feats[:-1], feats[-1]
    size = tuple(feats.shape[-2:])
    s_lab = downsample_mask(s_masks, size)
    q_lab = downsample_mask(episode.query_mask, size)
    image_labels = (s_masks, episode.query_mask) if cfg.trainer.loss_resolution == "image" else None
    seg, align, protos = segmentation_loss(sf, s_lab, qf, q_lab, episode.classes, cfg.trainer.alpha,
                                           cfg.trainer.align, image_labels)
    out = EpisodeLosses(seg, align, None, None)
    if not (cfg.use_cscl or cfg.use_cacl):
        return out

    views = [augment(img, m, rng, cfg.aug) for img, m in zip(s_imgs, s_masks)]
    views.append(augment(episode.query_image, episode.query_mask, rng, cfg.aug))
    with torch.no_grad():
        aug_feats = momentum_encoder(to_tensor(np.stack([v[0] for v in views]), dtype))
    aug_lab = downsample_mask(np.stack([v[1] for v in views]), size)
    tau = cfg.nce.temperature
    present = [c for c in episode.classes if c in protos.labels]

    if cfg.use_cscl:
        terms = []
        for c in present:
            res = cs_nce_loss(protos.get(c), aug_feats[:-1], aug_lab[:-1] == c, c, dictionary, tau,
                              cfg.csnce.num_negatives, rng)
            if res.loss is not None:
                terms.append(res.loss)
            if res.positive is not None:
                out.pushes.append((res.positive, c))
        out.cs = torch.stack(terms).mean() if terms else None
    if cfg.use_cacl:
        terms = []
        for c in present:
            loss = ca_nce_loss(protos.get(c), aug_feats[-1], aug_lab[-1] == c, tau, cfg.canece.num_negatives,
                               cfg.canece.group_size, rng)
            if loss is not None:
                terms.append(loss)
        out.ca = torch.stack(terms).mean() if terms else None
    return out


def _mean(values):
    values = [v for v in values if v is not None]
    return torch.stack(values).mean() if values else None


def _f(value):
    return None if value is None else float(value.detach())


def train_step(state: TrainState, episodes) -> LossReport:
    """One update: losses, SGD on theta, enqueue prototypes, EMA on theta_m.

    On a non-finite loss or gradient nothing in ``state`` changes.
    """
    cfg = state.config
    snapshot = state.rng.bit_generator.state
    report = None
    try:
        per = [episode_losses(state.encoder, state.momentum_encoder, state.dictionary, ep, cfg, state.rng)
               for ep in episodes]
        seg, align = _mean(p.seg for p in per), _mean(p.align for p in per)
        cs, ca = _mean(p.cs for p in per), _mean(p.ca for p in per)
        report = LossReport(state.step, _f(seg), _f(align), _f(cs), _f(ca), float("nan"), cfg.trainer.lr)
        total = total_loss(seg, align, cs, ca, cfg.nce.lambda_cs, cfg.nce.lambda_ca)
        report.total = float(total.detach())
        grads = gradients(state.encoder, total)
    except NonFiniteError as err:
        state.rng.bit_generator.state = snapshot
        raise NonFiniteError(f"{err}; report={report}") from err
    t = cfg.trainer
    params = [p for _, p in state.encoder.named_parameters()]
    sgd_step(params, [grads[n] for n, _ in state.encoder.named_parameters()], state.buffers,
             t.lr, t.sgd_momentum, t.weight_decay)
    for p in per:
        for vec, label in p.pushes:
            state.dictionary.push(vec, label)
    momentum_update(state.momentum_encoder, state.encoder, cfg.nce.momentum)
    state.step += 1
    return report


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "step": state.step,
        "encoder": state.encoder.state_dict(),
        "momentum_encoder": state.momentum_encoder.state_dict(),
        "buffers": [b.clone() for b in state.buffers],
        "dictionary": state.dictionary.state_dict(),
        "rng_state": state.rng.bit_generator.state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, config: ExperimentConfig | None = None) -> TrainState:
    """Restore a ``TrainState``.

    With ``config`` given, its hash must match the stored one; the given
    config then replaces the stored copy (it may differ in run length or
    output paths).
    """
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else None
        raise CheckpointError(f"unsupported checkpoint format {found!r}; expected {CHECKPOINT_FORMAT!r}")
    stored = config_from_dict(payload["config"])
    if config is not None and config.hash() != payload["config_hash"]:
        raise CheckpointError("config hash mismatch between checkpoint and config")
    cfg = config or stored
    dtype = torch_dtype(cfg.trainer.dtype)
    encoder = Encoder(cfg.encoder).to(dtype)
    encoder.load_state_dict(payload["encoder"])
    twin = Encoder(cfg.encoder).to(dtype)
    twin.load_state_dict(payload["momentum_encoder"])
    twin.requires_grad_(False)
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    return TrainState(cfg, encoder, twin, list(payload["buffers"]),
                      PrototypeDictionary.from_state_dict(payload["dictionary"]), rng, int(payload["step"]))


@functools.lru_cache(maxsize=8)
def _cached_dataset(seed, num_classes, images_per_class, resolution, downsample, distractor_prob):
    return generate_synthetic_dataset(seed, num_classes, images_per_class, resolution, downsample, distractor_prob)


def make_dataset(data: DataConfig, downsample: int = 16) -> SyntheticDataset:
    return _cached_dataset(data.seed, data.num_classes, data.images_per_class, data.resolution, downsample,
                           data.distractor_prob)


def dataset_for(cfg: ExperimentConfig) -> SyntheticDataset:
    return make_dataset(cfg.data, Encoder(cfg.encoder).total_stride)


LOG_FIELDS = ["step", "seg_loss", "align_loss", "cs_loss", "ca_loss", "total", "cs_skipped", "ca_skipped", "lr",
              "wall_time"]


def fit(state: TrainState, dataset: SyntheticDataset | None = None, log_path=None, checkpoint_dir=None,
        max_iterations: int | None = None) -> list[LossReport]:
    """Run training steps until ``max_iterations`` (default from the config)."""
    cfg = state.config
    dataset = dataset or dataset_for(cfg)
    split = split_folds(dataset.class_ids, cfg.data.folds, cfg.trainer.fold)
    stop = cfg.trainer.max_iterations if max_iterations is None else max_iterations
    reports = []
    writer = fh = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        fresh = state.step == 0 or not log_path.exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if fresh:
            writer.writeheader()
    try:
        while state.step < stop:
            t0 = time.perf_counter()
            episodes = [sample_episode(dataset, split.train_classes, cfg.data.way, cfg.data.shot, state.rng)
                        for _ in range(cfg.trainer.batch_size)]
            report = train_step(state, episodes)
            reports.append(report)
            if writer is not None:
                writer.writerow({**report.row(), "wall_time": round(time.perf_counter() - t0, 6)})
            if checkpoint_dir is not None and cfg.trainer.checkpoint_every > 0 \
                    and state.step % cfg.trainer.checkpoint_every == 0:
                save_checkpoint(state, Path(checkpoint_dir) / f"step_{state.step:06d}.pt")
                save_checkpoint(state, Path(checkpoint_dir) / "last.pt")
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_dir is not None:
        save_checkpoint(state, Path(checkpoint_dir) / "last.pt")
    return reports
