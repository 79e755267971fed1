"""Dynamic prototype dictionary and the two prototype contrastive losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import AugConfig
from .data import augment, downsample_mask
from .encoder import Encoder, to_tensor
from .prototype import DegenerateMaskError, multi_shot_pool, masked_average_pool, sample_negative_keys

SENTINEL_LABEL = -1


class PrototypeDictionary:
    """Fixed-capacity FIFO queue of (unit vector, class label) pairs.

    Stored as a ring buffer; ``ptr`` points at the oldest entry, which is the
    next one to be overwritten.
    """

    def __init__(self, vectors: torch.Tensor, labels: torch.Tensor, ptr: int = 0, pushes: int = 0):
        if vectors.shape[0] != labels.shape[0] or vectors.shape[0] == 0:
            raise ValueError("vectors and labels must be nonempty and equally long")
        self.vectors = vectors
        self.labels = labels
        self.ptr = ptr
        self.pushes = pushes

    @classmethod
    def init_random(cls, capacity: int, dim: int, rng: np.random.Generator, dtype=torch.float32):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        v = torch.from_numpy(rng.standard_normal((capacity, dim))).to(dtype)
        v = F.normalize(v, dim=1)
        return cls(v, torch.full((capacity,), SENTINEL_LABEL, dtype=torch.int64))

    @property
    def capacity(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.capacity

    def push(self, prototype: torch.Tensor, label: int) -> "PrototypeDictionary":
        if prototype.shape != (self.dim,):
            raise ValueError(f"prototype shape {tuple(prototype.shape)} != ({self.dim},)")
        self.vectors[self.ptr] = F.normalize(prototype.detach().to(self.vectors.dtype), dim=0)
        self.labels[self.ptr] = int(label)
        self.ptr = (self.ptr + 1) % self.capacity
        self.pushes += 1
        return self

    def entries(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Contents oldest first."""
        order = torch.cat([torch.arange(self.ptr, self.capacity), torch.arange(self.ptr)])
        return self.vectors[order], self.labels[order]

    def select_negatives(self, target_label: int, max_count: int, rng: np.random.Generator) -> torch.Tensor:
        """Up to ``max_count`` entries whose label differs from the target, uniformly without replacement."""
        candidates = torch.nonzero(self.labels != target_label).flatten().numpy()
        if candidates.size > max_count:
            candidates = np.sort(rng.choice(candidates, size=max_count, replace=False))
        return self.vectors[torch.from_numpy(candidates)]

    def state_dict(self) -> dict:
        return {"vectors": self.vectors.clone(), "labels": self.labels.clone(), "ptr": self.ptr, "pushes": self.pushes}

    @classmethod
    def from_state_dict(cls, state: dict) -> "PrototypeDictionary":
        return cls(state["vectors"].clone(), state["labels"].clone(), int(state["ptr"]), int(state["pushes"]))

    def copy(self) -> "PrototypeDictionary":
        return self.from_state_dict(self.state_dict())


def _cos(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # a: D, b: n x D; zero norms give 0
    return (b @ a) / (b.norm(dim=-1) * a.norm()).clamp_min(1e-8)


def info_nce(anchor: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """Cross-entropy with the positive at index 0 of ``[pos, neg_1, ..., neg_n] / tau``.

    Positive and negatives are detached, so gradients reach only the anchor.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if negatives.ndim != 2 or negatives.shape[0] == 0:
        raise ValueError("info_nce needs at least one negative")
    keys = torch.cat([positive.detach()[None], negatives.detach()])
    logits = _cos(anchor, keys) / tau
    return -torch.log_softmax(logits, dim=0)[0]


@dataclass
class CSResult:
    loss: torch.Tensor | None
    positive: torch.Tensor | None
    num_negatives: int = 0

    @property
    def skipped(self) -> bool:
        return self.loss is None


def cs_nce_loss(anchor, aug_features, aug_masks, class_label, dictionary: PrototypeDictionary,
                tau: float, num_negatives: int, rng: np.random.Generator) -> CSResult:
    """Class-specific term for one class.

    ``aug_features`` (S x D x h x w) come from the momentum encoder on the
    augmented supports, ``aug_masks`` are their binary class masks. The
    caller pushes ``result.positive`` into the dictionary afterwards.
    """
    try:
        positive = multi_shot_pool(aug_features.detach(), aug_masks)
    except DegenerateMaskError:
        return CSResult(None, None)
    negatives = dictionary.select_negatives(class_label, num_negatives, rng).to(anchor.dtype)
    if negatives.shape[0] == 0:
        return CSResult(None, positive)
    return CSResult(info_nce(anchor, positive, negatives, tau), positive, negatives.shape[0])


def ca_nce_loss(anchor, aug_query_features, aug_target_mask, tau: float, num_negatives: int,
                group_size: int, rng: np.random.Generator) -> torch.Tensor | None:
    """Class-agnostic term; ``None`` when the skip rule fires.

    The step is skipped when the target or the non-target region at feature
    resolution holds fewer than ``group_size`` pixels.
    """
    target = np.asarray(aug_target_mask)
    if target.sum() < group_size:
        return None
    f = aug_query_features.detach()
    negatives = sample_negative_keys(f, target, num_negatives, group_size, rng)
    if len(negatives) == 0:
        return None
    positive = masked_average_pool(f, target)
    return info_nce(anchor, positive, negatives.keys, tau)


def _momentum_features(momentum_encoder: Encoder, images: np.ndarray) -> torch.Tensor:
    dtype = next(momentum_encoder.parameters()).dtype
    with torch.no_grad():
        return momentum_encoder(to_tensor(images, dtype))


def cs_nce_step(support_images, support_masks, class_label, dictionary, encoder, momentum_encoder, tau, U,
                aug_rng, aug_cfg: AugConfig | None = None, push: bool = True):
    """Image-level class-specific step: augment, encode, pool, contrast, enqueue.

    ``support_images``: K x H x W x 3, ``support_masks``: K x H x W integer maps.
    Returns ``(loss_or_None, dictionary)``.
    """
    dtype = next(encoder.parameters()).dtype
    feats = encoder(to_tensor(np.asarray(support_images), dtype))
    size = tuple(feats.shape[-2:])
    masks = downsample_mask(np.asarray(support_masks), size) == class_label
    try:
        anchor = multi_shot_pool(feats, masks)
    except DegenerateMaskError:
        return None, dictionary
    views = [augment(img, m, aug_rng, aug_cfg) for img, m in zip(support_images, support_masks)]
    aug_feats = _momentum_features(momentum_encoder, np.stack([v[0] for v in views]))
    aug_masks = downsample_mask(np.stack([v[1] for v in views]), size) == class_label
    res = cs_nce_loss(anchor, aug_feats, aug_masks, class_label, dictionary, tau, U, aug_rng)
    if push and res.positive is not None:
        dictionary.push(res.positive, class_label)
    return res.loss, dictionary


def ca_nce_step(query_image, query_mask, class_label, p_c, momentum_encoder, tau, V, group_size,
                aug_rng, aug_cfg: AugConfig | None = None):
    """Image-level class-agnostic step; returns the loss or ``None`` on skip."""
    img, msk = augment(np.asarray(query_image), np.asarray(query_mask), aug_rng, aug_cfg)
    feats = _momentum_features(momentum_encoder, img[None])[0]
    target = downsample_mask(msk, tuple(feats.shape[-2:])) == class_label
    return ca_nce_loss(p_c, feats, target, tau, V, group_size, aug_rng)
