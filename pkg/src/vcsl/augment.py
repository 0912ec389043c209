"""Seeded view transforms for slices and volumes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TransformSpec:
    """Family of random views: crop-and-resize, flip, intensity scale, noise.

    ``per_slice`` draws independent parameters for every slice of a volume;
    by default one draw is shared by the whole volume.
    """

    crop_area: tuple[float, float] = (0.5, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    intensity: tuple[float, float] = (0.8, 1.2)
    noise_std: float = 0.05
    per_slice: bool = False

    def __post_init__(self):
        lo, hi = self.crop_area
        if not 0.5 <= lo <= hi <= 1.0:
            raise ValueError(f"crop area must lie in [0.5, 1], got {self.crop_area}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be a probability")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @classmethod
    def identity(cls) -> TransformSpec:
        return cls(crop_area=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_prob=0.0,
                   intensity=(1.0, 1.0), noise_std=0.0)


@dataclass(frozen=True)
class ViewParams:
    top: int
    left: int
    height: int
    width: int
    flip: bool
    gain: float
    noise_seed: int


def sample_params(spec: TransformSpec, rng: np.random.Generator, shape: tuple[int, int]) -> ViewParams:
    h, w = shape
    area = rng.uniform(*spec.crop_area)
    ratio = math.exp(rng.uniform(math.log(spec.crop_ratio[0]), math.log(spec.crop_ratio[1])))
    sh = min(1.0, math.sqrt(area * ratio))
    sw = min(1.0, area / sh)
    ch = min(h, math.ceil(sh * h - 1e-9))
    cw = min(w, math.ceil(sw * w - 1e-9))
    if ch < 2 or cw < 2:
        raise ValueError(f"degenerate crop window {ch}x{cw}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.random() < spec.flip_prob)
    gain = float(rng.uniform(*spec.intensity))
    noise_seed = int(rng.integers(0, 2**63 - 1))
    return ViewParams(top, left, ch, cw, flip, gain, noise_seed)


def _resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner alignment (exact when sizes already match)."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0.0, h - 1, out_h)
    xs = np.linspace(0.0, w - 1, out_w)
    y0 = np.minimum(np.floor(ys).astype(int), max(h - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(int), max(w - 2, 0))
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def apply_params(x: np.ndarray, params: ViewParams, noise_std: float) -> np.ndarray:
    """Apply one parameter draw to a slice ``(H, W)`` or every slice of ``(n, H, W)``."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    crop = x[..., params.top:params.top + params.height, params.left:params.left + params.width]
    if crop.ndim == 2:
        out = _resize(crop, h, w)
    else:
        out = np.stack([_resize(c, h, w) for c in crop])
    if params.flip:
        out = out[..., ::-1].copy()
    if params.gain != 1.0:
        out = out * params.gain
    if noise_std > 0:
        out = out + noise_std * np.random.default_rng(params.noise_seed).normal(size=out.shape)
    return out


def augment(x: np.ndarray, spec: TransformSpec, seed: int) -> np.ndarray:
    """Random view of a slice ``(H, W)`` or a volume ``(n, H, W)``; pure in ``(spec, seed, x)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise ValueError(f"expected a slice or a volume, got shape {x.shape}")
    if x.ndim == 3 and x.shape[0] == 0:
        raise ValueError("cannot augment an empty volume")
    if x.shape[-1] < 8 or x.shape[-2] < 8:
        raise ValueError(f"slices must be at least 8x8, got {x.shape[-2:]}")
    rng = np.random.default_rng(seed)
    if x.ndim == 3 and spec.per_slice:
        return np.stack([apply_params(s, sample_params(spec, rng, s.shape), spec.noise_std) for s in x])
    return apply_params(x, sample_params(spec, rng, x.shape[-2:]), spec.noise_std)


def augment_batch(batch: np.ndarray, spec: TransformSpec, seeds) -> np.ndarray:
    return np.stack([augment(x, spec, int(s)) for x, s in zip(batch, seeds)])
