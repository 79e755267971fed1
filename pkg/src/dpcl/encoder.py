"""Multi-level feature encoder and its momentum-updated twin."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig

LEVEL_TAGS = (2, 3, 4)


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class FeatureStack:
    values: torch.Tensor  # D x h x w (channels first)
    source_levels: tuple[int, ...]
    spatial_scale: int

    @property
    def dim(self) -> int:
        return self.values.shape[0]


def feature_values(features) -> torch.Tensor:
    return features.values if isinstance(features, FeatureStack) else features


class Encoder(nn.Module):
    """Stem plus three conv stages; tapped stages are projected and fused.

    Each stage is conv3x3 -> ReLU -> conv3x3 -> ReLU -> average-pool
    downsample. Tags 2, 3 and 4 name the three stages. Deeper taps are
    bilinearly resized to the shallowest tap's resolution, then all
    projected levels are concatenated along channels.
    """

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        cfg = cfg or EncoderConfig()
        self.cfg = cfg
        self.taps = tuple(sorted(cfg.taps))
        self.stem = nn.Conv2d(cfg.in_channels, cfg.stem_width, 3, padding=1)
        stages = []
        cin = cfg.stem_width
        deepest = LEVEL_TAGS.index(self.taps[-1])
        for width in cfg.widths[: deepest + 1]:
            stages.append(nn.ModuleList([nn.Conv2d(cin, width, 3, padding=1), nn.Conv2d(width, width, 3, padding=1)]))
            cin = width
        self.stages = nn.ModuleList(stages)
        self.proj = nn.ModuleDict(
            {str(t): nn.Conv2d(cfg.widths[LEVEL_TAGS.index(t)], cfg.proj_dim, 1) for t in self.taps}
        )

    @property
    def out_dim(self) -> int:
        return self.cfg.proj_dim * len(self.taps)

    @property
    def total_stride(self) -> int:
        s = self.cfg.stem_stride
        for st in self.cfg.strides[: len(self.stages)]:
            s *= st
        return s

    @property
    def feature_stride(self) -> int:
        """Input-to-feature downsampling factor at the shallowest tap."""
        s = self.cfg.stem_stride
        for st in self.cfg.strides[: LEVEL_TAGS.index(self.taps[0]) + 1]:
            s *= st
        return s

    def reset_parameters(self, rng: np.random.Generator) -> None:
        """Fan-in scaled uniform weights drawn from ``rng``; zero biases."""
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Conv2d):
                    fan_in = module.weight[0].numel()
                    bound = np.sqrt(6.0 / fan_in)
                    w = rng.uniform(-bound, bound, size=tuple(module.weight.shape))
                    module.weight.copy_(torch.from_numpy(w))
                    module.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``x``: B x C x H x W -> B x D x h x w."""
        H, W = x.shape[-2:]
        if H % self.total_stride or W % self.total_stride:
            raise ValueError(f"input {H}x{W} not divisible by encoder stride {self.total_stride}")
        x = F.relu(self.stem(2.0 * x - 1.0))
        if self.cfg.stem_stride > 1:
            x = F.avg_pool2d(x, self.cfg.stem_stride)
        tapped = []
        for tag, (c1, c2), stride in zip(LEVEL_TAGS, self.stages, self.cfg.strides):
            x = F.relu(c2(F.relu(c1(x))))
            if stride > 1:
                x = F.avg_pool2d(x, stride)
            if tag in self.taps:
                tapped.append(self.proj[str(tag)](x))
        size = tapped[0].shape[-2:]
        fused = [t if t.shape[-2:] == size else F.interpolate(t, size=size, mode="bilinear", align_corners=False)
                 for t in tapped]
        return torch.cat(fused, dim=1)


def build_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=torch.float32) -> Encoder:
    enc = Encoder(cfg).to(dtype)
    enc.reset_parameters(rng)
    return enc


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(..., H, W, C) numpy images -> (..., C, H, W) tensor."""
    t = torch.from_numpy(np.ascontiguousarray(images))
    return t.movedim(-1, -3).to(dtype)


def encode(params: Encoder, image) -> FeatureStack:
    dtype = next(params.parameters()).dtype
    x = image if isinstance(image, torch.Tensor) else to_tensor(image, dtype)
    values = params(x.unsqueeze(0))[0]
    return FeatureStack(values, params.taps, params.feature_stride)


def init_momentum_encoder(params: Encoder) -> Encoder:
    twin = copy.deepcopy(params)
    twin.requires_grad_(False)
    return twin


@torch.no_grad()
def momentum_update(momentum_params: Encoder, params: Encoder, m: float) -> Encoder:
    """In place: ``theta_m <- m * theta_m + (1 - m) * theta``."""
    if not 0 <= m < 1:
        raise ValueError(f"momentum {m} outside [0, 1)")
    for pm, p in zip(momentum_params.parameters(), params.parameters()):
        if pm.shape != p.shape:
            raise ValueError("encoder shapes differ")
        pm.mul_(m).add_(p.detach(), alpha=1 - m)
    return momentum_params


def param_distance(a: nn.Module, b: nn.Module) -> float:
    with torch.no_grad():
        sq = sum(((pa - pb) ** 2).sum() for pa, pb in zip(a.parameters(), b.parameters()))
        return float(torch.sqrt(sq))


def gradients(params: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """d(loss)/d(parameter) for every trainable parameter, zero where unused."""
    named = [(n, p) for n, p in params.named_parameters() if p.requires_grad]
    loss = torch.as_tensor(loss)
    if not torch.isfinite(loss).all():
        raise NonFiniteError(f"non-finite loss {loss.item()}")
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = {}
    for (n, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {n}")
        out[n] = g
    return out
