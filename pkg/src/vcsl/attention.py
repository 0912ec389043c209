"""Deformable self-attention over a sequence of slice features.

Tokens form a 1-D sequence (slice-major, then feature level), so reference
points, offsets and the relative-position bias all live on that single axis.
Each block is pre-norm: ``x + MHA(LN(x))`` then ``x + FFN(LN(x))``. With the
pyramid enabled, every block after the first starts by halving the sequence
with stride-2 average pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class AttentionConfig:
    width: int = 32
    heads: int = 2
    groups: int = 1
    blocks: int = 4
    seq_len: int = 32
    downsample: int = 2
    ffn_mult: int = 2
    embed_dim: int = 16
    max_offset: float | None = None
    pyramid: bool = True

    def __post_init__(self):
        if self.heads < 1 or self.width % self.heads:
            raise ValueError("width must be divisible by the number of heads")
        if self.groups < 1 or self.heads % self.groups or self.width % (2 * self.groups):
            raise ValueError("groups must divide heads and half the width")
        if self.downsample < 1:
            raise ValueError("downsample factor must be >= 1")
        if self.seq_len < self.min_length:
            raise ValueError(f"sequence length {self.seq_len} is shorter than the minimum {self.min_length}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @property
    def offset_bound(self) -> float:
        return float(self.downsample if self.max_offset is None else self.max_offset)

    @property
    def min_length(self) -> int:
        return 2 ** (self.blocks - 1) if self.pyramid else 1

    def block_lengths(self) -> list[int]:
        lengths = [self.seq_len]
        for _ in range(1, self.blocks):
            lengths.append(math.ceil(lengths[-1] / 2) if self.pyramid else lengths[-1])
        return lengths


def positional_encoding(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-math.log(10000.0) * (np.arange(0, width, 2) / width))
    pe = np.zeros((length, width))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: width // 2])
    return pe


def window_pool_matrix(length: int, factor: int) -> np.ndarray:
    """Average-pool consecutive windows of ``factor`` rows (last window may be short)."""
    out = math.ceil(length / factor)
    m = np.zeros((out, length))
    for j in range(out):
        lo, hi = j * factor, min((j + 1) * factor, length)
        m[j, lo:hi] = 1.0 / (hi - lo)
    return m


def reference_points(length: int, factor: int) -> np.ndarray:
    """Centres of the pooling windows in token coordinates."""
    out = math.ceil(length / factor)
    starts = np.arange(out) * factor
    sizes = np.minimum(factor, length - starts)
    return starts + (sizes - 1) / 2.0


def attention_head(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(d) + bias) v`` over the last two axes."""
    d = q.shape[-1]
    if d == 0:
        raise ValueError("head width must be positive")
    logits = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(d))
    if bias is not None:
        logits = logits + bias
    return ad.matmul(ad.softmax(logits), v)


def sample_interp(y: Tensor, positions: Tensor) -> Tensor:
    """Rows of ``y`` linearly interpolated at ``positions`` (clamped to the sequence)."""
    return ad.interp1d(y, positions)


class DeformableStack:
    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        f = cfg.width
        fg = f // cfg.groups
        for b, length in enumerate(cfg.block_lengths()):
            for name in ("wq", "wk", "wv", "wo"):
                self._add(f"block{b}.{name}", rng.normal(0.0, 1.0 / math.sqrt(f), size=(f, f)))
            self._add(f"block{b}.off1.w", rng.normal(0.0, 1.0 / math.sqrt(fg), size=(fg, fg // 2)))
            self._add(f"block{b}.off1.b", np.zeros(fg // 2))
            self._add(f"block{b}.off2.w", rng.normal(0.0, 0.1 / math.sqrt(fg // 2), size=(fg // 2, 1)))
            self._add(f"block{b}.off2.b", np.zeros(1))
            self._add(f"block{b}.rel_bias", rng.normal(0.0, 0.02, size=(cfg.heads, 2 * length - 1)))
            hidden = cfg.ffn_mult * f
            self._add(f"block{b}.ffn1.w", rng.normal(0.0, 1.0 / math.sqrt(f), size=(f, hidden)))
            self._add(f"block{b}.ffn1.b", np.zeros(hidden))
            self._add(f"block{b}.ffn2.w", rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, f)))
            self._add(f"block{b}.ffn2.b", np.zeros(f))
        self._add("out_proj", rng.normal(0.0, 1.0 / math.sqrt(f), size=(f, cfg.embed_dim)))
        self.pe = positional_encoding(cfg.seq_len, f)
        self.last_attention: list[np.ndarray] = []
        self.last_offsets: list[np.ndarray] = []

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=f"attention.{name}")

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def predict_offsets(self, q_grid: Tensor, block: int) -> Tensor:
        """Bounded offsets ``(..., D_G, 1)`` from grid-pooled per-group queries ``(..., D_G, F/G)``."""
        if q_grid.shape[-2] == 0:
            raise ValueError("cannot predict offsets for an empty sequence")
        p = self.params
        hidden = ad.silu(ad.matmul(q_grid, p[f"block{block}.off1.w"]) + p[f"block{block}.off1.b"])
        raw = ad.matmul(hidden, p[f"block{block}.off2.w"]) + p[f"block{block}.off2.b"]
        return ad.tanh(raw) * self.cfg.offset_bound

    def deformable_mha(self, x: Tensor, block: int, length: int) -> Tensor:
        cfg = self.cfg
        p = self.params
        v_, f = x.shape[0], cfg.width
        g, fg = cfg.groups, cfg.width // cfg.groups
        nh, dh = cfg.heads, cfg.head_dim
        grid = math.ceil(length / cfg.downsample)

        q = ad.matmul(x, p[f"block{block}.wq"])
        q_groups = ad.transpose(ad.reshape(q, (v_, length, g, fg)), (0, 2, 1, 3))
        q_grid = ad.matmul(Tensor(window_pool_matrix(length, cfg.downsample)), q_groups)
        offsets = ad.reshape(self.predict_offsets(q_grid, block), (v_ * g, grid))
        positions = offsets + reference_points(length, cfg.downsample)
        self.last_offsets.append(offsets.data.reshape(v_, g, grid))

        x_groups = ad.reshape(ad.transpose(ad.reshape(x, (v_, length, g, fg)), (0, 2, 1, 3)), (v_ * g, length, fg))
        sampled = sample_interp(x_groups, positions)
        sampled = ad.reshape(ad.transpose(ad.reshape(sampled, (v_, g, grid, fg)), (0, 2, 1, 3)), (v_, grid, f))
        k = ad.matmul(sampled, p[f"block{block}.wk"])
        v = ad.matmul(sampled, p[f"block{block}.wv"])

        def split(t, rows):
            return ad.transpose(ad.reshape(t, (v_, rows, nh, dh)), (0, 2, 1, 3))

        # relative offset of every query token to every sampled key, per head
        head_group = np.arange(nh) // (nh // g)
        pos_heads = ad.take(ad.reshape(positions, (v_, g, 1, grid)), head_group, axis=1)
        rel = ad.matmul(Tensor(np.ones((length, 1))), -pos_heads) + np.broadcast_to(
            np.arange(length, dtype=float)[:, None] + (length - 1), (length, grid)).copy()
        rel = ad.reshape(ad.transpose(rel, (1, 0, 2, 3)), (nh, v_ * length * grid))
        table = ad.reshape(p[f"block{block}.rel_bias"], (nh, 2 * length - 1, 1))
        bias = ad.transpose(ad.reshape(sample_interp(table, rel), (nh, v_, length, grid)), (1, 0, 2, 3))

        qh, kh, vh = split(q, length), split(k, grid), split(v, grid)
        logits = ad.matmul(qh, ad.transpose(kh)) * (1.0 / math.sqrt(dh)) + bias
        attn = ad.softmax(logits)
        self.last_attention.append(attn.data)
        heads = ad.matmul(attn, vh)
        merged = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (v_, length, f))
        return ad.matmul(merged, p[f"block{block}.wo"])

    def feed_forward(self, x: Tensor, block: int) -> Tensor:
        p = self.params
        h = ad.silu(ad.matmul(x, p[f"block{block}.ffn1.w"]) + p[f"block{block}.ffn1.b"])
        return ad.matmul(h, p[f"block{block}.ffn2.w"]) + p[f"block{block}.ffn2.b"]

    def encode_sequence(self, y: Tensor) -> Tensor:
        """Per-position outputs of the last block, ``(V, D_last, width)``."""
        y = ad.as_tensor(y)
        if y.ndim == 2:
            y = ad.reshape(y, (1,) + y.shape)
        cfg = self.cfg
        if y.shape[1] < cfg.min_length:
            raise ValueError(f"sequence of length {y.shape[1]} is too short; at least {cfg.min_length} rows required")
        if y.shape[1] != cfg.seq_len or y.shape[2] != cfg.width:
            raise ad.ShapeError("volume_embed", None,
                                f"input {y.shape[1:]} does not match configured ({cfg.seq_len}, {cfg.width})")
        self.last_attention, self.last_offsets = [], []
        x = y + self.pe
        for b, length in enumerate(cfg.block_lengths()):
            if b > 0 and cfg.pyramid:
                x = ad.matmul(Tensor(window_pool_matrix(x.shape[1], 2)), x)
            x = x + self.deformable_mha(ad.layer_norm(x), b, length)
            x = x + self.feed_forward(ad.layer_norm(x), b)
        return ad.layer_norm(x)

    def volume_embed(self, y: Tensor) -> Tensor:
        """Unit-norm holistic embedding ``(V, embed_dim)`` (or ``(embed_dim,)`` for one volume)."""
        single = ad.as_tensor(y).ndim == 2
        h = self.encode_sequence(y)
        pooled = ad.mean(h, axis=1)
        z = ad.l2_normalize(ad.matmul(pooled, self.params["out_proj"]), axis=-1)
        return ad.reshape(z, (-1,)) if single else z

    def output_coordinates(self, token_positions: np.ndarray) -> np.ndarray:
        """Map input-token coordinates onto the last block's sequence axis."""
        factor = 2 ** (self.cfg.blocks - 1) if self.cfg.pyramid else 1
        return (np.asarray(token_positions, dtype=float) - (factor - 1) / 2.0) / factor


def volume_embed(y: Tensor, stack: DeformableStack) -> Tensor:
    return stack.volume_embed(y)
