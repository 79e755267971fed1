"""Synthetic-shapes dataset, fold splits, episode sampling and augmentation.

Class id 0 is background; foreground classes are 1-based and each one is a
distinct shape family. Everything here is a pure function of its inputs and
an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import AugConfig

SHAPE_FAMILIES = (
    "disk", "square", "triangle", "ring", "cross",
    "bar", "star", "hexagon", "crescent", "ellipse",
)

_SQRT3 = np.sqrt(3.0)


def _inside(family: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u, v are object-frame coordinates; the shape fits in the unit disk
    r2 = u * u + v * v
    if family == "disk":
        return r2 <= 1.0
    if family == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.7
    if family == "triangle":
        return (v >= -0.5) & (_SQRT3 * np.abs(u) + v <= 1.0)
    if family == "ring":
        return (r2 <= 1.0) & (r2 >= 0.45**2)
    if family == "cross":
        return ((np.abs(u) <= 0.35) & (np.abs(v) <= 0.95)) | ((np.abs(v) <= 0.35) & (np.abs(u) <= 0.95))
    if family == "bar":
        return (np.abs(u) <= 0.95) & (np.abs(v) <= 0.4)
    if family == "star":
        phi = np.arctan2(v, u)
        return np.sqrt(r2) <= 0.7 + 0.3 * np.cos(5 * phi)
    if family == "hexagon":
        au, av = np.abs(u), np.abs(v)
        return (av <= _SQRT3 / 2) & (_SQRT3 * au + av <= _SQRT3)
    if family == "crescent":
        return (r2 <= 1.0) & ((u - 0.55) ** 2 + v * v > 0.6**2)
    if family == "ellipse":
        return u * u + (v / 0.55) ** 2 <= 1.0
    raise KeyError(family)


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    mask: np.ndarray  # H x W, int64 class ids
    class_ids: frozenset

    def __post_init__(self):
        if self.pixels.shape[:2] != self.mask.shape:
            raise ValueError("pixels and mask must share spatial dimensions")


@dataclass
class SyntheticDataset:
    images: list[LabeledImage]
    seed: int
    resolution: int
    class_names: dict[int, str]
    by_class: dict[int, list[int]] = field(init=False)

    def __post_init__(self):
        self.by_class = {c: [] for c in self.class_names}
        for i, img in enumerate(self.images):
            for c in sorted(img.class_ids):
                self.by_class[c].append(i)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return self.images[i]

    @property
    def class_ids(self) -> set[int]:
        return set(self.class_names)


def _background(rng: np.random.Generator, res: int) -> np.ndarray:
    # low-saturation grey with oriented stripes and smooth noise
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    base = rng.uniform(0.25, 0.75) + rng.uniform(-0.08, 0.08, size=3)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.3, 1.0)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    noise = ndimage.gaussian_filter(rng.normal(size=(res, res)), 1.0)
    noise /= noise.std() + 1e-12
    tex = 0.15 * stripes + 0.08 * noise
    img = base[None, None, :] + tex[..., None]
    img += rng.normal(scale=0.03, size=img.shape)
    return img


def _place(rng: np.random.Generator, family: str, res: int) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    while True:
        radius = rng.uniform(0.2, 0.6) * res / 2
        cy, cx = rng.uniform(radius, res - radius, size=2)
        rot = rng.uniform(0, 2 * np.pi)
        dx, dy = (xx - cx) / radius, (yy - cy) / radius
        u = np.cos(rot) * dx + np.sin(rot) * dy
        v = -np.sin(rot) * dx + np.cos(rot) * dy
        inside = _inside(family, u, v)
        if inside.any():
            return inside


# each class owns a narrow hue band; golden-ratio spacing interleaves the
# bands so a contiguous block of held-out classes never sits in a region of
# hue space that no training class covers
HUE_STEP = (np.sqrt(5.0) - 1) / 2
HUE_JITTER = 0.03


def _fill_color(rng: np.random.Generator, class_id: int) -> np.ndarray:
    hue = ((class_id - 1) * HUE_STEP + rng.uniform(-HUE_JITTER, HUE_JITTER)) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.5, 1.0)))


def render_image(rng: np.random.Generator, classes: list[int], res: int) -> LabeledImage:
    """Render one image containing one object per entry of ``classes``.

    Objects are painted in increasing class-id order, so a later class id
    wins where objects overlap.
    """
    img = _background(rng, res)
    mask = np.zeros((res, res), dtype=np.int64)
    for c in sorted(classes):
        inside = _place(rng, SHAPE_FAMILIES[c - 1], res)
        color = _fill_color(rng, c)
        obj = color[None, :] + rng.normal(scale=0.02, size=(int(inside.sum()), 3))
        img[inside] = obj
        mask[inside] = c
    present = frozenset(int(c) for c in np.unique(mask) if c != 0)
    return LabeledImage(np.clip(img, 0.0, 1.0).astype(np.float32), mask, present)


def generate_synthetic_dataset(
    seed: int,
    num_classes: int,
    images_per_class: int,
    resolution: int,
    downsample: int = 16,
    distractor_prob: float = 0.0,
) -> SyntheticDataset:
    if num_classes < 4:
        raise ValueError("num_classes must be >= 4 for a 4-fold split")
    if num_classes > len(SHAPE_FAMILIES):
        raise ValueError(f"only {len(SHAPE_FAMILIES)} shape families are available")
    if resolution < 32:
        raise ValueError("resolution must be >= 32")
    if resolution % downsample:
        raise ValueError(f"resolution {resolution} not divisible by encoder stride {downsample}")
    if images_per_class < 1:
        raise ValueError("images_per_class must be >= 1")
    root = np.random.SeedSequence(seed)
    children = root.spawn(num_classes * images_per_class)
    images = []
    for c in range(1, num_classes + 1):
        for i in range(images_per_class):
            rng = np.random.default_rng(children[(c - 1) * images_per_class + i])
            classes = [c]
            if distractor_prob > 0 and rng.uniform() < distractor_prob:
                others = [k for k in range(1, num_classes + 1) if k != c]
                classes.append(int(rng.choice(others)))
            img = render_image(rng, classes, resolution)
            # the primary class may be painted over by a later id; re-draw
            while c not in img.class_ids:
                img = render_image(rng, classes, resolution)
            images.append(img)
    names = {c: SHAPE_FAMILIES[c - 1] for c in range(1, num_classes + 1)}
    return SyntheticDataset(images, seed, resolution, names)


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_classes: frozenset
    test_classes: frozenset


def split_folds(class_ids, num_folds: int, fold_index: int) -> FoldSplit:
    ids = sorted(class_ids)
    if num_folds < 1 or num_folds > len(ids):
        raise ValueError(f"cannot split {len(ids)} classes into {num_folds} folds")
    if not 0 <= fold_index < num_folds:
        raise ValueError(f"fold_index {fold_index} outside [0, {num_folds})")
    blocks = np.array_split(np.asarray(ids), num_folds)
    test = frozenset(int(c) for c in blocks[fold_index])
    return FoldSplit(fold_index, frozenset(ids) - test, test)


@dataclass
class Episode:
    """An N-way K-shot task.

    Support images are laid out ``[way][shot]``: image ``(n, k)`` is sampled
    for class ``classes[n]``. Masks hold class ids restricted to the episode's
    classes; everything else is background.
    """

    support_images: np.ndarray  # N x K x H x W x 3
    support_masks: np.ndarray  # N x K x H x W
    query_image: np.ndarray  # H x W x 3
    query_mask: np.ndarray  # H x W
    classes: tuple[int, ...]
    episode_seed: int
    image_indices: tuple[int, ...] = ()

    @property
    def way(self) -> int:
        return len(self.classes)

    @property
    def shot(self) -> int:
        return self.support_images.shape[1]

    def flat_supports(self) -> tuple[np.ndarray, np.ndarray]:
        n, k = self.support_images.shape[:2]
        return (
            self.support_images.reshape(n * k, *self.support_images.shape[2:]),
            self.support_masks.reshape(n * k, *self.support_masks.shape[2:]),
        )


def restrict_mask(mask: np.ndarray, classes) -> np.ndarray:
    """Map every id outside ``classes`` to background."""
    return np.where(np.isin(mask, list(classes)), mask, 0)


def binary_masks(mask: np.ndarray, classes) -> np.ndarray:
    """Per-class binary channels ``M_c`` for an integer label map."""
    return np.stack([(mask == c) for c in classes]).astype(np.uint8)


def sample_episode(dataset: SyntheticDataset, classes, way: int, shot: int, rng: np.random.Generator) -> Episode:
    pool = sorted(classes)
    if len(pool) < way:
        raise ValueError(f"need {way} classes, only {len(pool)} available")
    episode_seed = int(rng.integers(2**31 - 1))
    erng = np.random.default_rng(episode_seed)
    chosen = [int(c) for c in erng.choice(pool, size=way, replace=False)]
    used: set[int] = set()
    support_idx = []
    for c in chosen:
        candidates = [i for i in dataset.by_class[c] if i not in used]
        if len(candidates) < shot + 1:
            raise ValueError(f"class {c} has too few images for a {shot}-shot episode")
        picks = [int(i) for i in erng.choice(candidates, size=shot, replace=False)]
        used.update(picks)
        support_idx.append(picks)
    query_class = chosen[int(erng.integers(way))]
    candidates = [i for i in dataset.by_class[query_class] if i not in used]
    if not candidates:
        raise ValueError(f"class {query_class} has no image left for the query")
    q = int(erng.choice(candidates))

    s_img = np.stack([np.stack([dataset[i].pixels for i in row]) for row in support_idx])
    s_mask = np.stack([np.stack([restrict_mask(dataset[i].mask, chosen) for i in row]) for row in support_idx])
    flat = tuple(i for row in support_idx for i in row) + (q,)
    return Episode(
        s_img, s_mask, dataset[q].pixels, restrict_mask(dataset[q].mask, chosen),
        tuple(chosen), episode_seed, flat,
    )


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour downsampling, sampling the centre pixel of each block.

    Works on any leading dimensions; the last two axes are spatial.
    """
    H, W = mask.shape[-2:]
    h, w = target
    if h <= 0 or w <= 0 or H % h or W % w:
        raise ValueError(f"cannot downsample {H}x{W} to {h}x{w}")
    fy, fx = H // h, W // w
    return mask[..., fy // 2::fy, fx // 2::fx]


def upsample_labels(labels: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    h, w = labels.shape[-2:]
    H, W = target
    if H % h or W % w:
        raise ValueError(f"cannot upsample {h}x{w} to {H}x{W}")
    return np.repeat(np.repeat(labels, H // h, axis=-2), W // w, axis=-1)


def _crop_box(rng: np.random.Generator, H: int, W: int, scale: tuple[float, float]):
    for _ in range(100):
        area = rng.uniform(*scale) * H * W
        ratio = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
        h = np.sqrt(area / ratio)
        w = np.sqrt(area * ratio)
        if 1 <= h <= H and 1 <= w <= W:
            y0 = rng.uniform(0, H - h)
            x0 = rng.uniform(0, W - w)
            return y0, x0, h, w
    return 0.0, 0.0, float(H), float(W)


def _luma(image: np.ndarray) -> np.ndarray:
    return image @ np.array([0.299, 0.587, 0.114], dtype=image.dtype)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, cfg: AugConfig | None = None):
    """Random crop/flip (image and mask) plus jitter/grayscale/blur (image only)."""
    cfg = cfg or AugConfig()
    H, W = mask.shape
    img, msk = image, mask
    if rng.uniform() < cfg.crop_prob:
        y0, x0, h, w = _crop_box(rng, H, W, cfg.crop_scale)
        # source coordinate of each output pixel centre, in pixel-index units
        ys = y0 + (np.arange(H) + 0.5) * h / H - 0.5
        xs = x0 + (np.arange(W) + 0.5) * w / W - 0.5
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        img = np.stack(
            [ndimage.map_coordinates(img[..., ch], [yy, xx], order=1, mode="nearest") for ch in range(img.shape[-1])],
            axis=-1,
        )
        iy = np.clip(np.floor(yy + 0.5).astype(np.int64), 0, H - 1)
        ix = np.clip(np.floor(xx + 0.5).astype(np.int64), 0, W - 1)
        msk = msk[iy, ix]
    if rng.uniform() < cfg.flip_prob:
        img = img[:, ::-1]
        msk = msk[:, ::-1]
    if rng.uniform() < cfg.jitter_prob:
        s = cfg.jitter_strength
        b, c, sat = rng.uniform(1 - s, 1 + s, size=3)
        img = img * b
        mean = img.mean()
        img = (img - mean) * c + mean
        gray = _luma(img)[..., None]
        img = (img - gray) * sat + gray
        img = np.clip(img, 0.0, 1.0)
    if rng.uniform() < cfg.grayscale_prob:
        img = np.repeat(_luma(img)[..., None], img.shape[-1], axis=-1)
    if rng.uniform() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma)
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0))
    return np.ascontiguousarray(img, dtype=image.dtype), np.ascontiguousarray(msk)


def export_dataset(dataset: SyntheticDataset, root: str | Path) -> Path:
    """Write PNGs (one directory per class) plus ``manifest.json``."""
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    counters = {c: 0 for c in dataset.class_names}
    for img in dataset.images:
        primary = min(img.class_ids)
        name = dataset.class_names[primary]
        idx = counters[primary]
        counters[primary] += 1
        d = root / name
        d.mkdir(exist_ok=True)
        stem = f"{idx:05d}"
        Image.fromarray(np.round(img.pixels * 255).astype(np.uint8), mode="RGB").save(d / f"{stem}.png")
        Image.fromarray(img.mask.astype(np.uint8), mode="L").save(d / f"{stem}_mask.png")
        records.append({"image": f"{name}/{stem}.png", "mask": f"{name}/{stem}_mask.png"})
    manifest = {
        "seed": dataset.seed,
        "resolution": dataset.resolution,
        "classes": {str(c): n for c, n in dataset.class_names.items()},
        "files": records,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def import_dataset(root: str | Path) -> SyntheticDataset:
    from PIL import Image

    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    images = []
    for rec in manifest["files"]:
        pixels = np.asarray(Image.open(root / rec["image"]).convert("RGB"), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(root / rec["mask"]), dtype=np.int64)
        present = frozenset(int(c) for c in np.unique(mask) if c != 0)
        images.append(LabeledImage(pixels, mask, present))
    names = {int(c): n for c, n in manifest["classes"].items()}
    return SyntheticDataset(images, manifest["seed"], manifest["resolution"], names)
