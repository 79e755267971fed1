"""Masked average pooling, prototype sets and random-average-pooled negative keys."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .encoder import feature_values as _values


class DegenerateMaskError(ValueError):
    """Raised when a mask selects no pixel, so pooling has no denominator."""


@dataclass
class Prototype:
    vector: torch.Tensor
    class_label: int
    source: str = "support"


@dataclass
class PrototypeSet:
    """Prototype vectors (P x D) with their class labels; background is label 0."""

    vectors: torch.Tensor
    labels: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.labels)

    def get(self, label: int) -> torch.Tensor:
        return self.vectors[self.labels.index(label)]


@dataclass
class NegativeKeySet:
    keys: torch.Tensor  # V x D, empty when sampling was skipped
    group_size: int

    def __len__(self) -> int:
        return self.keys.shape[0]


def _as_mask(mask, like: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    return m.to(like.dtype)


def masked_average_pool(features, mask) -> torch.Tensor:
    """Mean of the D x h x w feature field over pixels where ``mask == 1``."""
    f = _values(features)
    m = _as_mask(mask, f)
    if m.shape != f.shape[-2:]:
        raise ValueError(f"mask {tuple(m.shape)} does not match features {tuple(f.shape[-2:])}")
    count = m.sum()
    if count == 0:
        raise DegenerateMaskError("mask selects no pixel")
    return (f * m).sum(dim=(-2, -1)) / count


def multi_shot_pool(features: torch.Tensor, masks) -> torch.Tensor:
    """Average of per-shot pooled vectors over shots with a nonempty mask.

    ``features``: S x D x h x w, ``masks``: S x h x w binary.
    """
    pooled = []
    for f, m in zip(features, masks):
        try:
            pooled.append(masked_average_pool(f, m))
        except DegenerateMaskError:
            continue
    if not pooled:
        raise DegenerateMaskError("every shot has an empty mask")
    return torch.stack(pooled).mean(0)


def build_prototype_set(support_features: torch.Tensor, support_labels: np.ndarray, classes) -> PrototypeSet:
    """Background prototype followed by one prototype per class.

    ``support_labels`` holds integer class maps (S x h x w) at feature
    resolution. Classes whose masks are empty across every shot are dropped
    with a warning.
    """
    support_labels = np.asarray(support_labels)
    vectors, labels = [], []
    bg = support_labels == 0
    for label, mask in [(0, bg)] + [(int(c), support_labels == c) for c in classes]:
        try:
            vectors.append(multi_shot_pool(support_features, mask))
            labels.append(label)
        except DegenerateMaskError:
            warnings.warn(f"degenerate mask for class {label}; prototype dropped", RuntimeWarning)
    if not vectors:
        raise DegenerateMaskError("no prototype could be built")
    return PrototypeSet(torch.stack(vectors), tuple(labels))


def sample_negative_keys(query_features, target_mask, V: int, group_size: int, rng: np.random.Generator) -> NegativeKeySet:
    """Average ``group_size`` random non-target pixels, ``V`` times.

    Pixels are drawn uniformly with replacement. When fewer than
    ``group_size`` eligible pixels exist the set comes back empty.
    """
    if V <= 0:
        raise ValueError("V must be positive")
    f = _values(query_features)
    f = f.detach()
    D = f.shape[0]
    eligible = np.flatnonzero(np.asarray(target_mask).reshape(-1) == 0)
    if eligible.size < group_size:
        return NegativeKeySet(f.new_zeros((0, D)), group_size)
    picks = eligible[rng.integers(0, eligible.size, size=(V, group_size))]
    flat = f.reshape(D, -1).T
    keys = flat[torch.from_numpy(picks)].mean(dim=1)
    return NegativeKeySet(keys, group_size)
