"""Stochastic image augmentations: weak tier, strong fixed-pool tier, mixup.

All functions take a (C, H, W) float array with pixels in [0, 1] and return
one with the same shape and range. Randomness is fully determined by the
seed argument; there is no global RNG state. Geometric ops use
nearest-neighbour resampling with edge replication.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# magnitude ranges per op kind; translation/rotation magnitudes are fractions
# of the image size / degrees, intensity ops are factors or thresholds
STRONG_RANGES = {
    "horizontal-flip": None,
    "translate-x": (0.0, 0.25),
    "translate-y": (0.0, 0.25),
    "rotate": (-15.0, 15.0),
    "brightness": (0.5, 1.5),
    "contrast": (0.5, 1.5),
    "solarize": (0.5, 1.0),
    "posterize": (3, 8),
    "sharpen-blur": (-1.0, 1.0),
}

STRONG_POOL = tuple(STRONG_RANGES)


def _clip(img):
    return np.clip(img, 0.0, 1.0)


def hflip(img):
    return img[:, :, ::-1].copy()


@lru_cache(maxsize=512)
def _shift_index(n: int, d: int) -> np.ndarray:
    """Source indices for an edge-replicated shift by d along an axis of n."""
    return np.clip(np.arange(n) - d, 0, n - 1)


def translate(img, dx: int, dy: int):
    """Integer shift with edge replication; +dx moves content right."""
    c, h, w = img.shape
    dx = max(-w + 1, min(w - 1, int(dx)))
    dy = max(-h + 1, min(h - 1, int(dy)))
    rows = _shift_index(h, dy)
    cols = _shift_index(w, dx)
    return img[:, rows[:, None], cols[None, :]]


@lru_cache(maxsize=32)
def _centered_grid(h: int, w: int):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    return yy, xx, cy, cx


def rotate(img, degrees: float):
    """Rotate about the image centre, nearest neighbour, edge clamped."""
    c, h, w = img.shape
    theta = np.deg2rad(degrees)
    yy, xx, cy, cx = _centered_grid(h, w)
    # inverse map: target pixel -> source pixel
    src_y = np.cos(theta) * yy - np.sin(theta) * xx + cy
    src_x = np.sin(theta) * yy + np.cos(theta) * xx + cx
    iy = np.clip(np.rint(src_y).astype(np.int64), 0, h - 1)
    ix = np.clip(np.rint(src_x).astype(np.int64), 0, w - 1)
    return img[:, iy, ix]


def brightness(img, factor: float):
    return _clip(img * factor)


def contrast(img, factor: float):
    mean = img.mean()
    return _clip((img - mean) * factor + mean)


def solarize(img, threshold: float):
    return np.where(img < threshold, img, 1.0 - img)


def posterize(img, levels: int):
    levels = max(2, int(levels))
    return np.rint(img * (levels - 1)) / (levels - 1)


def sharpen_blur(img, amount: float):
    """amount > 0 sharpens, < 0 blurs, using a 3x3 box blur as the base."""
    pad = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    blur = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            blur += pad[:, dy : dy + img.shape[1], dx : dx + img.shape[2]]
    blur /= 9.0
    return _clip(img + amount * (img - blur))


def cutout(img, size: int, cy: int, cx: int):
    """Square of side `size` centred at (cy, cx), filled with the image mean,
    clipped at the borders."""
    c, h, w = img.shape
    fill = img.mean()
    y0, y1 = max(0, cy - size // 2), min(h, cy - size // 2 + size)
    x0, x1 = max(0, cx - size // 2), min(w, cx - size // 2 + size)
    out = img.copy()
    out[:, y0:y1, x0:x1] = fill
    return out


@dataclass(frozen=True)
class AugmentPolicy:
    """One augmentation tier. 'identity' applies nothing, 'weak' flips and
    shifts, 'strong' samples n_ops ops from the fixed pool then cutout."""

    tier: str = "weak"
    n_ops: int = 2
    cutout_size: int | None = None  # None -> image side // 4

    def __post_init__(self):
        if self.tier not in ("identity", "weak", "strong"):
            raise ValueError(f"unknown augment tier {self.tier!r}")
        if self.n_ops < 1:
            raise ValueError("n_ops must be >= 1")

    def apply(self, img, rng_seed: int):
        if self.tier == "identity":
            return img.copy()
        if self.tier == "weak":
            return weak_augment(img, rng_seed)
        return strong_augment(img, rng_seed, n_ops=self.n_ops, cutout_size=self.cutout_size)

    def to_dict(self):
        return {"tier": self.tier, "n_ops": self.n_ops, "cutout_size": self.cutout_size}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


IDENTITY = AugmentPolicy("identity")
WEAK = AugmentPolicy("weak")
STRONG = AugmentPolicy("strong")


def weak_augment(img, rng_seed: int):
    """Horizontal flip with p=0.5, then integer shifts uniform in
    [-H/8, H/8] on both axes with edge replication.

    Implemented as a single gather: equals translate(hflip(img), dx, dy)
    when the flip fires.
    """
    rng = np.random.default_rng(rng_seed)
    c, h, w = img.shape
    flip = rng.random() < 0.5
    max_shift = h // 8
    dx = int(rng.integers(-max_shift, max_shift + 1))
    dy = int(rng.integers(-max_shift, max_shift + 1))
    rows = _shift_index(h, dy)
    cols = _shift_index(w, dx)
    if flip:
        cols = (w - 1) - cols
    return img[:, rows[:, None], cols[None, :]]


def _apply_strong_op(img, kind, rng):
    h, w = img.shape[1], img.shape[2]
    if kind == "horizontal-flip":
        return hflip(img)
    if kind == "translate-x":
        lo, hi = STRONG_RANGES[kind]
        mag = rng.uniform(lo, hi) * w
        return translate(img, int(np.rint(mag)) * (1 if rng.random() < 0.5 else -1), 0)
    if kind == "translate-y":
        lo, hi = STRONG_RANGES[kind]
        mag = rng.uniform(lo, hi) * h
        return translate(img, 0, int(np.rint(mag)) * (1 if rng.random() < 0.5 else -1))
    if kind == "rotate":
        return rotate(img, rng.uniform(*STRONG_RANGES[kind]))
    if kind == "brightness":
        return brightness(img, rng.uniform(*STRONG_RANGES[kind]))
    if kind == "contrast":
        return contrast(img, rng.uniform(*STRONG_RANGES[kind]))
    if kind == "solarize":
        return solarize(img, rng.uniform(*STRONG_RANGES[kind]))
    if kind == "posterize":
        lo, hi = STRONG_RANGES[kind]
        return posterize(img, int(rng.integers(lo, hi + 1)))
    if kind == "sharpen-blur":
        return sharpen_blur(img, rng.uniform(*STRONG_RANGES[kind]))
    raise ValueError(f"unknown augment op {kind!r}")


def strong_augment(img, rng_seed: int, n_ops: int = 2, cutout_size: int | None = None):
    """Sample n_ops ops (with replacement) from the fixed pool, apply them
    with random magnitudes, then cutout filled with the image mean."""
    rng = np.random.default_rng(rng_seed)
    out = img
    for _ in range(n_ops):
        kind = STRONG_POOL[int(rng.integers(len(STRONG_POOL)))]
        out = _apply_strong_op(out, kind, rng)
    h, w = img.shape[1], img.shape[2]
    size = cutout_size if cutout_size is not None else max(1, h // 4)
    cy = int(rng.integers(h))
    cx = int(rng.integers(w))
    return _clip(cutout(out, size, cy, cx))


def k_augment(img, k: int, rng_seed: int):
    """k independent weak augmentations with per-instance derived seeds."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    seeds = derive_seeds(rng_seed, k)
    return [weak_augment(img, s) for s in seeds]


def derive_seeds(rng_seed: int, n: int) -> np.ndarray:
    """n child seeds, stable under rng_seed (prefix-stable in n)."""
    return np.random.SeedSequence(rng_seed).generate_state(n, dtype=np.uint64)


def mixup(x_l, y_l, x_u, y_u, alpha_param: float, rng_seed: int, alpha: float | None = None):
    """Convex combination pulled toward the first argument.

    Draws alpha ~ Beta(alpha_param, alpha_param) then replaces it with
    max(alpha, 1 - alpha), so the mixed example keeps the identity of
    (x_l, y_l); the same coefficient mixes the label vectors. Pass
    ``alpha`` to inject the draw (the max rule still applies).
    """
    if alpha_param <= 0:
        raise ValueError(f"alpha_param must be > 0, got {alpha_param}")
    x_l, x_u = np.asarray(x_l), np.asarray(x_u)
    y_l, y_u = np.asarray(y_l), np.asarray(y_u)
    if x_l.shape != x_u.shape or y_l.shape != y_u.shape:
        raise ValueError("mixup operands must have matching shapes")
    if alpha is None:
        alpha = float(np.random.default_rng(rng_seed).beta(alpha_param, alpha_param))
    a = max(float(alpha), 1.0 - float(alpha))
    return (
        (a * x_l + (1.0 - a) * x_u).astype(x_l.dtype),
        (a * y_l + (1.0 - a) * y_u).astype(y_l.dtype),
    )
