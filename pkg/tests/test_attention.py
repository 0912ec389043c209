import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vcsl import autodiff as ad
from vcsl.attention import (
    AttentionConfig,
    DeformableStack,
    attention_head,
    positional_encoding,
    reference_points,
    sample_interp,
    window_pool_matrix,
)
from vcsl.autodiff import Graph, Tensor, check_gradient

TOY = AttentionConfig(width=8, heads=2, groups=1, blocks=2, seq_len=8, downsample=2, embed_dim=8)


# --- plain numpy reference of the stack -------------------------------------

def _lerp_rows(y, u):
    u = min(max(u, 0.0), len(y) - 1.0)
    lo = min(int(math.floor(u)), len(y) - 2) if len(y) > 1 else 0
    frac = u - lo
    if len(y) == 1:
        return y[0].copy()
    return (1 - frac) * y[lo] + frac * y[lo + 1]


def _layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def _silu(x):
    return x / (1 + np.exp(-x))


def _reference_block(x, p, b, cfg, length):
    """One pre-norm block for a single volume ``x (length, F)`` using explicit loops."""
    f, g, nh, dh, r = cfg.width, cfg.groups, cfg.heads, cfg.head_dim, cfg.downsample
    fg = f // g
    h = _layer_norm(x)
    q = h @ p[f"block{b}.wq"]
    grid = math.ceil(length / r)
    centres = [(j * r + (min(r, length - j * r) - 1) / 2) for j in range(grid)]
    positions = np.zeros((g, grid))
    for gi in range(g):
        for j in range(grid):
            rows = q[j * r:min((j + 1) * r, length), gi * fg:(gi + 1) * fg]
            pooled = rows.mean(axis=0)
            hid = _silu(pooled @ p[f"block{b}.off1.w"] + p[f"block{b}.off1.b"])
            off = math.tanh((hid @ p[f"block{b}.off2.w"] + p[f"block{b}.off2.b"])[0]) * cfg.offset_bound
            positions[gi, j] = centres[j] + off
    sampled = np.zeros((grid, f))
    for gi in range(g):
        cols = slice(gi * fg, (gi + 1) * fg)
        for j in range(grid):
            sampled[j, cols] = _lerp_rows(h[:, cols], positions[gi, j])
    k = sampled @ p[f"block{b}.wk"]
    v = sampled @ p[f"block{b}.wv"]
    table = p[f"block{b}.rel_bias"]
    out = np.zeros((length, f))
    for head in range(nh):
        gi = head // (nh // g)
        cols = slice(head * dh, (head + 1) * dh)
        for i in range(length):
            logits = np.array([
                q[i, cols] @ k[j, cols] / math.sqrt(dh)
                + _lerp_rows(table[head][:, None], i - positions[gi, j] + length - 1)[0]
                for j in range(grid)])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out[i, cols] = w @ v[:, cols]
    x = x + out @ p[f"block{b}.wo"]
    hid = _silu(_layer_norm(x) @ p[f"block{b}.ffn1.w"] + p[f"block{b}.ffn1.b"])
    return x + hid @ p[f"block{b}.ffn2.w"] + p[f"block{b}.ffn2.b"]


def _reference_embed(y, stack):
    cfg = stack.cfg
    p = {k: t.data for k, t in stack.params.items()}
    x = y + positional_encoding(cfg.seq_len, cfg.width)
    for b, length in enumerate(cfg.block_lengths()):
        if b > 0:
            x = np.array([x[i:i + 2].mean(axis=0) for i in range(0, len(x), 2)])
        x = _reference_block(x, p, b, cfg, length)
    z = _layer_norm(x).mean(axis=0) @ p["out_proj"]
    return z / np.linalg.norm(z)


# -----------------------------------------------------------------------------

def _stack(cfg=TOY, seed=0):
    return DeformableStack(cfg, np.random.default_rng(seed))


def _dense_heads(x, p, cfg):
    q, k, v = x @ p["wq"], x @ p["wk"], x @ p["wv"]
    heads, weights = [], []
    for h in range(cfg.heads):
        cols = slice(h * cfg.head_dim, (h + 1) * cfg.head_dim)
        logits = q[:, cols] @ k[:, cols].T / math.sqrt(cfg.head_dim)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        weights.append(w)
        heads.append(w @ v[:, cols])
    return np.concatenate(heads, axis=1) @ p["wo"], weights


class TestInterpolation:
    def test_integer_positions_exact(self):
        y = np.random.default_rng(0).normal(size=(6, 3))
        out = sample_interp(Tensor(y), Tensor(np.arange(6.0))).data
        assert np.abs(out - y).max() <= 1e-12

    def test_integer_two(self):
        y = np.random.default_rng(1).normal(size=(5, 4))
        np.testing.assert_array_equal(sample_interp(Tensor(y), Tensor([2.0])).data[0], y[2])

    def test_midpoint(self):
        y = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [3.0, 3.0, 3.0]])
        out = sample_interp(Tensor(y), Tensor([1.5])).data
        assert np.abs(out[0] - 2.0).max() <= 1e-12

    def test_clamped_below(self):
        y = np.random.default_rng(2).normal(size=(4, 2))
        np.testing.assert_array_equal(sample_interp(Tensor(y), Tensor([-0.7])).data[0], y[0])

    def test_nan_position(self):
        with pytest.raises(ValueError):
            sample_interp(Tensor(np.ones((3, 2))), Tensor([np.nan]))


class TestAttentionHead:
    def test_single_key_returns_value(self):
        rng = np.random.default_rng(0)
        q, k, v = rng.normal(size=(5, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        out = attention_head(Tensor(q), Tensor(k), Tensor(v)).data
        np.testing.assert_allclose(out, np.repeat(v, 5, axis=0), rtol=0, atol=1e-15)

    def test_constant_logit_shift(self):
        rng = np.random.default_rng(1)
        q, k, v = rng.normal(size=(5, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        plain = attention_head(Tensor(q), Tensor(k), Tensor(v)).data
        shifted = attention_head(Tensor(q), Tensor(k), Tensor(v), Tensor(np.full((5, 3), 7.3))).data
        assert np.abs(plain - shifted).max() < 1e-12

    def test_zero_width_head(self):
        with pytest.raises(ValueError):
            attention_head(Tensor(np.ones((2, 0))), Tensor(np.ones((2, 0))), Tensor(np.ones((2, 0))))


class TestOffsets:
    def test_zero_network_gives_zero_offsets(self):
        stack = _stack()
        for name in ("off1.w", "off1.b", "off2.w", "off2.b"):
            stack.params[f"block0.{name}"].data[:] = 0.0
        q = np.random.default_rng(0).normal(size=(1, 1, 4, 8))
        np.testing.assert_array_equal(stack.predict_offsets(Tensor(q), 0).data, 0.0)

    def test_offsets_bounded(self):
        stack = _stack()
        stack.params["block0.off2.w"].data *= 100.0
        rng = np.random.default_rng(1)
        q = rng.normal(scale=10.0, size=(1000, 1, 1, 8))
        off = stack.predict_offsets(Tensor(q), 0).data
        assert np.abs(off).max() <= TOY.offset_bound

    def test_offset_gradient(self):
        stack = _stack()
        q = Tensor(np.random.default_rng(2).normal(size=(1, 1, 4, 8)))
        graph = Graph(lambda: ad.sum(stack.predict_offsets(q, 0)))
        graph.evaluate({})
        for name in ("off1.w", "off1.b", "off2.w", "off2.b"):
            assert check_gradient(graph, "output", stack.params[f"block0.{name}"]) < 1e-4

    def test_empty_sequence(self):
        with pytest.raises(ValueError):
            _stack().predict_offsets(Tensor(np.zeros((1, 1, 0, 8))), 0)


def _reduction_stack(seed):
    cfg = AttentionConfig(width=8, heads=2, groups=1, blocks=1, seq_len=6, downsample=1, embed_dim=8)
    stack = DeformableStack(cfg, np.random.default_rng(seed))
    stack.params["block0.off2.w"].data[:] = 0.0
    stack.params["block0.off2.b"].data[:] = 0.0
    stack.params["block0.rel_bias"].data[:] = 0.0
    return stack


class TestDeformableMHA:
    @pytest.mark.parametrize("seed", range(20))
    def test_reduces_to_dense_attention(self, seed):
        stack = _reduction_stack(seed)
        x = np.random.default_rng(100 + seed).normal(size=(1, 6, 8))
        out = stack.deformable_mha(Tensor(x), 0, 6).data[0]
        p = {n: stack.params[f"block0.{n}"].data for n in ("wq", "wk", "wv", "wo")}
        expected, weights = _dense_heads(x[0], p, stack.cfg)
        assert np.abs(out - expected).max() < 1e-10
        for h in range(2):
            assert np.abs(stack.last_attention[0][0, h] - weights[h]).max() < 1e-10

    def test_attention_rows_are_distributions(self):
        stack = _stack(AttentionConfig(width=8, heads=4, groups=2, blocks=3, seq_len=12, embed_dim=8))
        y = np.random.default_rng(3).normal(size=(3, 12, 8))
        stack.volume_embed(Tensor(y))
        assert len(stack.last_attention) == 3
        for attn in stack.last_attention:
            assert attn.min() >= 0
            assert np.abs(attn.sum(axis=-1) - 1.0).max() < 1e-6

    def test_offsets_recorded_within_bound(self):
        stack = _stack()
        stack.volume_embed(Tensor(np.random.default_rng(4).normal(size=(2, 8, 8))))
        for off in stack.last_offsets:
            assert np.abs(off).max() <= TOY.offset_bound


class TestVolumeEmbed:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_unit_norm(self, seed):
        y = np.random.default_rng(seed).normal(size=(3, 8, 8))
        z = _stack().volume_embed(Tensor(y)).data
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)

    def test_single_volume_shape(self):
        assert _stack().volume_embed(Tensor(np.ones((8, 8)) + np.eye(8))).shape == (8,)

    def test_slice_permutation_changes_embedding(self):
        stack = _stack()
        y = np.random.default_rng(5).normal(size=(4, 2, 8))
        perm = np.array([2, 0, 3, 1])
        z = stack.volume_embed(Tensor(y.reshape(8, 8))).data
        z_perm = stack.volume_embed(Tensor(y[perm].reshape(8, 8))).data
        assert np.abs(z - z_perm).max() > 1e-6

    def test_identical_slices_zero_offsets_match_reference(self):
        stack = _stack()
        for b in range(TOY.blocks):
            stack.params[f"block{b}.off2.w"].data[:] = 0.0
            stack.params[f"block{b}.off2.b"].data[:] = 0.0
        one_slice = np.random.default_rng(6).normal(size=(2, 8))
        y = np.tile(one_slice, (4, 1))
        z = stack.volume_embed(Tensor(y)).data
        assert np.abs(z - _reference_embed(y, stack)).max() < 1e-9

    @pytest.mark.parametrize("cfg", [
        TOY,
        AttentionConfig(width=8, heads=4, groups=2, blocks=3, seq_len=12, embed_dim=8),
        AttentionConfig(width=8, heads=2, groups=1, blocks=2, seq_len=9, downsample=3, embed_dim=8),
    ])
    def test_matches_reference_with_learned_offsets(self, cfg):
        stack = _stack(cfg, seed=7)
        for b in range(cfg.blocks):
            stack.params[f"block{b}.off2.w"].data *= 20.0
        y = np.random.default_rng(8).normal(size=(cfg.seq_len, 8))
        z = stack.volume_embed(Tensor(y)).data
        assert np.abs(z - _reference_embed(y, stack)).max() < 1e-9
        assert max(np.abs(o).max() for o in stack.last_offsets) > 0.1

    def test_too_short_names_minimum(self):
        cfg = AttentionConfig(width=8, heads=2, blocks=4, seq_len=8, embed_dim=8)
        with pytest.raises(ValueError, match="at least 8"):
            DeformableStack(cfg, np.random.default_rng(0)).volume_embed(Tensor(np.ones((4, 8))))
        with pytest.raises(ValueError, match="minimum 8"):
            AttentionConfig(width=8, heads=2, blocks=4, seq_len=4, embed_dim=8)

    def test_every_parameter_matches_finite_differences(self):
        stack = _stack()
        rng = np.random.default_rng(9)
        y = Tensor(rng.normal(size=(8, 8)))
        probe = Tensor(rng.normal(size=8))
        graph = Graph(lambda: ad.sum(ad.mul(stack.volume_embed(y), probe)))
        graph.evaluate({})
        for name, p in stack.parameters().items():
            assert check_gradient(graph, "output", p) < 1e-4, name


class TestHelpers:
    def test_window_pool_short_tail(self):
        m = window_pool_matrix(5, 2)
        np.testing.assert_array_equal(m[-1], [0, 0, 0, 0, 1.0])
        np.testing.assert_allclose(m.sum(axis=1), 1.0)

    def test_reference_points(self):
        np.testing.assert_array_equal(reference_points(5, 2), [0.5, 2.5, 4.0])
        np.testing.assert_array_equal(reference_points(4, 1), [0, 1, 2, 3])

    def test_positional_encoding_is_pure(self):
        a = positional_encoding(10, 8)
        np.testing.assert_array_equal(a, positional_encoding(10, 8))
        np.testing.assert_array_equal(a[0, 1::2], 1.0)

    def test_output_coordinates(self):
        stack = _stack()
        # two blocks: each output row averages two input tokens
        np.testing.assert_array_equal(stack.output_coordinates(np.array([0.5, 2.5])), [0.0, 1.0])
