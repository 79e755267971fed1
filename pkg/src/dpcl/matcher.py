"""Cosine matching of query pixels against prototypes, and mIoU."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import upsample_labels
from .encoder import feature_values as _values
from .prototype import PrototypeSet

_EPS = 1e-8


@dataclass
class ProbabilityMap:
    values: torch.Tensor  # P x h x w, softmax over the first axis
    class_order: tuple[int, ...]


@dataclass
class SegmentationResult:
    per_class_iou: dict[int, float]
    miou: float
    intersections: dict[int, int] = field(default_factory=dict)
    unions: dict[int, int] = field(default_factory=dict)


def cosine_map(features: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every pixel to every prototype: P x h x w.

    Zero-norm vectors get similarity 0.
    """
    f = _values(features)
    dots = torch.einsum("dhw,pd->phw", f, prototypes)
    fn = f.norm(dim=0)
    pn = prototypes.norm(dim=1)
    return dots / (pn[:, None, None] * fn[None]).clamp_min(_EPS)


def class_logits(features, prototypes, alpha: float) -> torch.Tensor:
    return alpha * cosine_map(features, prototypes.vectors if isinstance(prototypes, PrototypeSet) else prototypes)


def class_probability_map(features, prototypes, alpha: float) -> ProbabilityMap:
    """Softmax over prototypes of ``alpha * cos(f(x, y), p_j)``."""
    if len(prototypes) == 0:
        raise ValueError("empty prototype set")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    logits = class_logits(features, prototypes, alpha)
    return ProbabilityMap(torch.softmax(logits, dim=0), tuple(prototypes.labels))


def predict_mask(prob: ProbabilityMap) -> np.ndarray:
    """Per-pixel argmax as class labels; ties go to the lowest channel."""
    v = prob.values.detach()
    # torch.argmax does not promise first-index ties, so do it explicitly
    best = v.max(dim=0, keepdim=True).values
    channel = (v == best).to(torch.int64).argmax(dim=0).numpy()
    return np.asarray(prob.class_order)[channel]


def mean_iou(predictions, ground_truths, eval_classes) -> SegmentationResult:
    """Dataset-level IoU per class (counts pooled over episodes), then the mean."""
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths differ in length")
    classes = sorted(eval_classes)
    inter = {c: 0 for c in classes}
    union = {c: 0 for c in classes}
    for pred, gt in zip(predictions, ground_truths):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            try:
                pred = upsample_labels(pred, gt.shape)
            except ValueError as err:
                raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}") from err
        for c in classes:
            p, g = pred == c, gt == c
            inter[c] += int(np.count_nonzero(p & g))
            union[c] += int(np.count_nonzero(p | g))
    ious = {}
    for c in classes:
        if union[c] == 0:
            warnings.warn(f"class {c} absent from predictions and ground truth; excluded", RuntimeWarning)
            continue
        ious[c] = inter[c] / union[c]
    miou = float(np.mean(list(ious.values()))) if ious else float("nan")
    return SegmentationResult(ious, miou, inter, union)
