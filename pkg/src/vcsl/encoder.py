"""Per-slice convolutional feature extractor with multi-level taps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    """Small stride-2 CNN standing in for a ResNet backbone.

    ``levels`` is the number of trailing stages tapped for the multi-level
    slice feature; each tap is pooled and projected to ``level_width``.
    """

    channels: tuple[int, ...] = (8, 16, 32, 64)
    kernel: int = 3
    levels: int = 2
    level_width: int = 32
    embed_dim: int = 16
    input_size: int = 32

    def __post_init__(self):
        if not 1 <= self.levels <= len(self.channels):
            raise ValueError(f"levels must be between 1 and {len(self.channels)}")
        if self.input_size < 8:
            raise ValueError("input_size must be at least 8")

    @property
    def feature_width(self) -> int:
        """Width of the concatenated multi-level feature of one slice."""
        return self.levels * self.level_width


class SliceEncoder:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        c_in = 1
        k = cfg.kernel
        for i, c_out in enumerate(cfg.channels):
            self._add(f"conv{i}.w", rng.normal(0.0, np.sqrt(2.0 / (c_in * k * k)), size=(c_out, c_in, k, k)))
            self._add(f"conv{i}.b", np.zeros(c_out))
            c_in = c_out
        for level, c in enumerate(cfg.channels[-cfg.levels:]):
            self._add(f"tap{level}.w", rng.normal(0.0, 1.0 / np.sqrt(c), size=(c, cfg.level_width)))
            self._add(f"tap{level}.b", np.zeros(cfg.level_width))
        self._add("proj", rng.normal(0.0, 1.0 / np.sqrt(cfg.feature_width), size=(cfg.feature_width, cfg.embed_dim)))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=f"encoder.{name}")

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def _check_extent(self, x: np.ndarray) -> None:
        size = self.cfg.input_size
        if x.shape[-2:] != (size, size):
            raise ValueError(f"slice extent {x.shape[-2:]} does not match configured {size}x{size}")

    def levels(self, x) -> list[Tensor]:
        """Tap features of a slice batch ``(B, H, W)``: ``levels`` tensors of shape ``(B, level_width)``."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        self._check_extent(x)
        h = Tensor(x[:, None])
        taps = []
        first_tap = len(self.cfg.channels) - self.cfg.levels
        for i in range(len(self.cfg.channels)):
            p = self.params
            h = ad.silu(ad.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=2, padding=self.cfg.kernel // 2))
            if i >= first_tap:
                level = i - first_tap
                pooled = ad.mean(h, axis=(2, 3))
                taps.append(ad.matmul(pooled, p[f"tap{level}.w"]) + p[f"tap{level}.b"])
        return taps

    def features(self, x) -> Tensor:
        """Concatenated multi-level feature ``(B, levels * level_width)``."""
        return ad.concat(self.levels(x), axis=1)

    def encode(self, x) -> Tensor:
        """Unit-norm slice embeddings ``(B, embed_dim)``."""
        pre = ad.matmul(self.features(x), self.params["proj"])
        return ad.l2_normalize(pre, axis=-1)

    def encode_volume_slices(self, volumes) -> Tensor:
        """Stacked multi-level rows ``(V, n * levels, level_width)``, slice-major then level.

        Accepts one volume ``(n, H, W)`` (returns ``(n * levels, level_width)``)
        or a batch ``(V, n, H, W)``.
        """
        if isinstance(volumes, (list, tuple)):
            if len({np.shape(v) for v in volumes}) > 1:
                raise ValueError("volumes in a batch must share slice count and extent")
            volumes = np.stack(volumes)
        volumes = np.asarray(volumes, dtype=np.float64)
        single = volumes.ndim == 3
        if single:
            volumes = volumes[None]
        if volumes.ndim != 4 or volumes.shape[1] < 1:
            raise ValueError(f"expected volumes (V, n, H, W) with n >= 1, got {volumes.shape}")
        v, n = volumes.shape[:2]
        width = self.cfg.level_width
        feats = self.features(volumes.reshape((v * n,) + volumes.shape[2:]))
        out = ad.reshape(feats, (n * self.cfg.levels, width) if single else (v, n * self.cfg.levels, width))
        return out


def encode_slice(x: np.ndarray, encoder: SliceEncoder) -> Tensor:
    """Unit-norm embedding of one slice ``(H, W)``."""
    return ad.reshape(encoder.encode(np.asarray(x)[None]), (-1,))


def encode_volume_slices(volume: np.ndarray, encoder: SliceEncoder) -> Tensor:
    return encoder.encode_volume_slices(volume)
