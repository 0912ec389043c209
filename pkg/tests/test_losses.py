import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vcsl import autodiff as ad
from vcsl.augment import TransformSpec, augment_batch
from vcsl.autodiff import Graph, Tensor, check_gradient
from vcsl.losses import (
    LossConfig,
    batch_inter_loss,
    batch_intra_loss,
    code_fit_loss,
    fit_loss,
    inter_loss,
    intra_loss,
    solve_codes,
)
from vcsl.probe import TOY_ATTENTION, TOY_CLUSTERS, TOY_ENCODER, TOY_SLICES
from vcsl.training import ModelState

TIGHT = LossConfig(tau=0.1, eps=0.05, sinkhorn_iters=1000, sinkhorn_tol=1e-9)


def _unit_rows(rng, m, d):
    z = rng.normal(size=(m, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _unit_cols(rng, d, h):
    c = rng.normal(size=(d, h))
    return c / np.linalg.norm(c, axis=0, keepdims=True)


def _scalar_fit(z, q, c, tau):
    """Cross-entropy between renormalized q and softmax(z C / tau), one row at a time."""
    total = 0.0
    for i in range(len(z)):
        logits = [sum(z[i][a] * c[a][k] for a in range(len(z[i]))) / tau for k in range(len(c[0]))]
        top = max(logits)
        log_norm = top + math.log(sum(math.exp(v - top) for v in logits))
        weight = sum(q[i])
        total -= sum(q[i][k] / weight * (logits[k] - log_norm) for k in range(len(logits)))
    return total / len(z)


@pytest.fixture(scope="module")
def toy_state():
    return ModelState.create(TOY_ENCODER, TOY_ATTENTION, TOY_CLUSTERS, seed=0)


class TestFitLoss:
    def test_orthogonal_feature_uniform_code(self):
        c = np.eye(5)[:, 1:]
        z = np.eye(5)[:1]
        loss = fit_loss(Tensor(z), np.full((1, 4), 0.25), c, 0.1)
        assert loss.item() == pytest.approx(math.log(4), abs=1e-12)

    def test_closed_form_two_prototypes(self):
        c = np.eye(2)
        loss = code_fit_loss(Tensor([1.0, 0.0]), np.array([1.0, 0.0]), c, 1.0)
        assert loss.item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
        assert loss.item() == pytest.approx(0.3133, abs=1e-4)

    def test_sharp_temperature_limit(self):
        c = np.eye(2)
        z = np.array([math.cos(0.3), math.sin(0.3)])
        margin = z @ c[:, 0] - z @ c[:, 1]
        assert margin >= 0.5
        loss = code_fit_loss(Tensor(z), np.array([1.0, 0.0]), c, 0.01)
        assert loss.item() < 0.05

    def test_code_rows_renormalized(self):
        rng = np.random.default_rng(0)
        z, c, q = _unit_rows(rng, 3, 4), _unit_cols(rng, 4, 5), rng.uniform(size=(3, 5))
        a = fit_loss(Tensor(z), q, c, 0.1).item()
        b = fit_loss(Tensor(z), q * 7.0, c, 0.1).item()
        assert a == pytest.approx(b, rel=1e-14)

    def test_zero_code_rejected(self):
        with pytest.raises(ValueError):
            fit_loss(Tensor(np.ones((1, 2))), np.zeros((1, 2)), np.eye(2), 0.1)

    @pytest.mark.parametrize("tau", [0.0, -0.5])
    def test_bad_temperature(self, tau):
        with pytest.raises(ValueError):
            fit_loss(Tensor(np.ones((1, 2))), np.ones((1, 2)), np.eye(2), tau)
        with pytest.raises(ValueError):
            LossConfig(tau=tau)

    def test_argmax_stable_under_common_column_scale(self):
        rng = np.random.default_rng(2)
        z, c = _unit_rows(rng, 20, 6), _unit_cols(rng, 6, 7)
        scaled = 3.5 * c
        scaled /= np.linalg.norm(scaled, axis=0, keepdims=True)
        np.testing.assert_array_equal(np.argmax(z @ c, axis=1), np.argmax(z @ scaled, axis=1))


class TestIntraLoss:
    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(42)
        z_t, z_s, c = _unit_rows(rng, 2, 4), _unit_rows(rng, 2, 4), _unit_cols(rng, 4, 3)
        q_t, q_s = rng.uniform(size=(2, 3)), rng.uniform(size=(2, 3))
        got = intra_loss(Tensor(z_t), q_t, Tensor(z_s), q_s, c, 0.1).item()
        expected = _scalar_fit(z_t.tolist(), q_s.tolist(), c.tolist(), 0.1) + \
            _scalar_fit(z_s.tolist(), q_t.tolist(), c.tolist(), 0.1)
        assert abs(got - expected) < 1e-12

    def test_identical_views_with_matching_codes_give_twice_entropy(self):
        rng = np.random.default_rng(1)
        z, c = _unit_rows(rng, 1, 4), _unit_cols(rng, 4, 3)
        logits = z @ c / 0.1
        p = np.exp(logits - logits.max())
        p /= p.sum()
        entropy = -(p * np.log(p)).sum()
        loss = intra_loss(Tensor(z), p, Tensor(z), p, c, 0.1).item()
        assert loss == pytest.approx(2 * entropy, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_swap_bit_identical(self, seed):
        rng = np.random.default_rng(seed)
        z_t, z_s, c = _unit_rows(rng, 6, 5), _unit_rows(rng, 6, 5), _unit_cols(rng, 5, 4)
        q_t, q_s, _ = solve_codes(Tensor(z_t), Tensor(z_s), c, TIGHT)
        q_s2, q_t2, _ = solve_codes(Tensor(z_s), Tensor(z_t), c, TIGHT)
        np.testing.assert_array_equal(q_t, q_t2)
        a = intra_loss(Tensor(z_t), q_t, Tensor(z_s), q_s, c, 0.1).item()
        b = intra_loss(Tensor(z_s), q_s2, Tensor(z_t), q_t2, c, 0.1).item()
        assert a == b

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        z_t, z_s, c = _unit_rows(rng, 4, 3), _unit_rows(rng, 4, 3), _unit_cols(rng, 3, 5)
        q_t, q_s, _ = solve_codes(Tensor(z_t), Tensor(z_s), c, TIGHT)
        assert intra_loss(Tensor(z_t), q_t, Tensor(z_s), q_s, c, 0.1).item() >= -1e-12

    def test_prototype_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        z_t, z_s, c = _unit_rows(rng, 4, 3), _unit_rows(rng, 4, 3), _unit_cols(rng, 3, 5)
        q_t, q_s, _ = solve_codes(Tensor(z_t), Tensor(z_s), c, TIGHT)
        graph = Graph(lambda c: intra_loss(Tensor(z_t), q_t, Tensor(z_s), q_s, c, 0.1))
        graph.evaluate({"c": c})
        assert check_gradient(graph, "output", "c") < 1e-4


class TestBatchLosses:
    def test_needs_two_items(self, toy_state):
        x = np.zeros((1, 8, 8))
        with pytest.raises(ValueError):
            batch_intra_loss(x, x, toy_state.encoder, toy_state.prototypes, TIGHT)
        v = np.zeros((1, TOY_SLICES, 8, 8))
        with pytest.raises(ValueError):
            batch_inter_loss(v, v, toy_state.encoder, toy_state.stack, toy_state.prototypes, TIGHT)

    def test_identical_slices_collapse(self, toy_state):
        """Equal features force uniform codes, so the loss is twice the cross-entropy to uniform."""
        x = np.random.default_rng(0).normal(size=(8, 8))
        batch = np.repeat(x[None], 4, axis=0)
        views = augment_batch(batch, TransformSpec.identity(), np.arange(4))
        np.testing.assert_array_equal(views, batch)
        loss = batch_intra_loss(views, views, toy_state.encoder, toy_state.prototypes, TIGHT).item()
        with ad.no_grad():
            z = toy_state.encoder.encode(x[None]).data
        logits = z @ toy_state.prototypes.weight.data / TIGHT.tau
        log_p = logits - logits.max() - np.log(np.exp(logits - logits.max()).sum())
        assert loss == pytest.approx(-2 * log_p.mean(), abs=1e-9)

    def test_batch_order_invariance(self, toy_state):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(6, 8, 8)), rng.normal(size=(6, 8, 8))
        perm = rng.permutation(6)
        base = batch_intra_loss(a, b, toy_state.encoder, toy_state.prototypes, TIGHT).item()
        shuffled = batch_intra_loss(a[perm], b[perm], toy_state.encoder, toy_state.prototypes, TIGHT).item()
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_inter_swap_bit_identical(self, toy_state):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(3, TOY_SLICES, 8, 8)), rng.normal(size=(3, TOY_SLICES, 8, 8))
        args = (toy_state.encoder, toy_state.stack, toy_state.prototypes, TIGHT)
        assert batch_inter_loss(a, b, *args).item() == batch_inter_loss(b, a, *args).item()

    def test_single_cluster_gives_zero(self):
        state = ModelState.create(TOY_ENCODER, TOY_ATTENTION, 1, seed=0)
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(2, TOY_SLICES, 8, 8)), rng.normal(size=(2, TOY_SLICES, 8, 8))
        loss = batch_inter_loss(a, b, state.encoder, state.stack, state.prototypes, TIGHT)
        assert loss.item() == 0.0

    def test_inter_scalar_loop_oracle(self, toy_state):
        rng = np.random.default_rng(8)
        a, b = rng.normal(size=(2, TOY_SLICES, 8, 8)), rng.normal(size=(2, TOY_SLICES, 8, 8))
        args = (toy_state.encoder, toy_state.stack, toy_state.prototypes, TIGHT)
        got = batch_inter_loss(a, b, *args).item()
        with ad.no_grad():
            z_t = toy_state.stack.volume_embed(toy_state.encoder.encode_volume_slices(a))
            z_s = toy_state.stack.volume_embed(toy_state.encoder.encode_volume_slices(b))
        q_t, q_s, _ = solve_codes(z_t, z_s, toy_state.prototypes, TIGHT)
        c = toy_state.prototypes.weight.data.tolist()
        tau = TIGHT.for_volumes().tau
        expected = _scalar_fit(z_t.data.tolist(), q_s.tolist(), c, tau) + \
            _scalar_fit(z_s.data.tolist(), q_t.tolist(), c, tau)
        assert abs(got - expected) < 1e-12

    def test_shared_prototypes_receive_both_gradients(self, toy_state):
        assert toy_state.prototypes_for_volumes is toy_state.prototypes
        rng = np.random.default_rng(9)
        c = toy_state.prototypes.weight
        slices = rng.normal(size=(2, 4, 8, 8))
        vols = rng.normal(size=(2, 3, TOY_SLICES, 8, 8))
        for fn in (lambda: batch_intra_loss(slices[0], slices[1], toy_state.encoder, toy_state.prototypes, TIGHT),
                   lambda: batch_inter_loss(vols[0], vols[1], toy_state.encoder, toy_state.stack,
                                            toy_state.prototypes, TIGHT)):
            graph = Graph()
            with graph:
                loss = fn()
            graph.backward(loss)
            assert np.abs(c.grad).max() > 0

    def test_inter_loss_is_the_swapped_form(self):
        assert inter_loss is intra_loss


class TestVolumeTemperature:
    def test_default_volume_temperature(self):
        cfg = LossConfig()
        assert cfg.for_volumes().tau == 0.3 and cfg.tau == 0.1

    def test_null_reuses_slice_temperature(self):
        cfg = LossConfig(tau=0.2, tau_3d=None)
        assert cfg.for_volumes() is cfg

    def test_bad_volume_temperature(self):
        with pytest.raises(ValueError):
            LossConfig(tau_3d=0.0)

    def test_inter_loss_uses_volume_temperature(self, toy_state):
        rng = np.random.default_rng(8)
        a, b = rng.normal(size=(3, TOY_SLICES, 8, 8)), rng.normal(size=(3, TOY_SLICES, 8, 8))
        enc, stack, protos = toy_state.encoder, toy_state.stack, toy_state.prototypes
        cfg = LossConfig(tau=0.1, eps=0.05, sinkhorn_iters=1000, sinkhorn_tol=1e-9, tau_3d=0.7)
        z_t = stack.volume_embed(enc.encode_volume_slices(a))
        z_s = stack.volume_embed(enc.encode_volume_slices(b))
        q_t, q_s, _ = solve_codes(z_t, z_s, protos, cfg)
        expected = intra_loss(z_t, q_t, z_s, q_s, protos, 0.7).item()
        assert batch_inter_loss(a, b, enc, stack, protos, cfg).item() == expected
