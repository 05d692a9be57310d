import math

import numpy as np
import pytest

from slotvid import engine
from slotvid.engine import Value
from slotvid.slot_attention import (
    AttentionMask,
    MaskLayout,
    SlotAttentionParams,
    forward_batch,
    permute_slots_check,
    slot_attention_forward,
)

from gradcheck import fd_check


def make_params(seed, n_slots, d_in, d_slot, iterations=3, **kw):
    rng = engine.rng_for(seed, "sa-params")
    return SlotAttentionParams.create(rng, n_slots, d_in, d_slot, iterations=iterations, **kw)


def _ln64(x, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _trace_forward(inputs, p):
    """Independent float64 re-evaluation of one full forward pass."""

    def f64(v):
        return np.asarray(v.data, dtype=np.float64)

    def sig(x):
        return 1.0 / (1.0 + np.exp(-x))

    def ramp(x):
        return x * sig(1.702 * x)

    xn = _ln64(inputs) * f64(p.in_norm_g) + f64(p.in_norm_b)
    k = xn @ f64(p.wk)
    v = xn @ f64(p.wv)
    slots = f64(p.slots)
    d_att = p.wq.data.shape[1]
    attn = None
    for _ in range(p.iterations):
        sn = _ln64(slots) * f64(p.slot_norm_g) + f64(p.slot_norm_b)
        q = sn @ f64(p.wq)
        logits = (k @ q.T) / math.sqrt(d_att)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        weights = attn / (attn.sum(axis=0, keepdims=True) + p.eps)
        updates = weights.T @ v
        z = sig(updates @ f64(p.gru.wz) + slots @ f64(p.gru.uz) + f64(p.gru.bz))
        r = sig(updates @ f64(p.gru.wr) + slots @ f64(p.gru.ur) + f64(p.gru.br))
        cand = np.tanh(updates @ f64(p.gru.wh) + (r * slots) @ f64(p.gru.uh) + f64(p.gru.bh))
        slots = (1.0 - z) * slots + z * cand
        pre = _ln64(slots) * f64(p.mlp_norm_g) + f64(p.mlp_norm_b)
        hidden = ramp(pre @ f64(p.mlp_w1) + f64(p.mlp_b1))
        slots = slots + hidden @ f64(p.mlp_w2) + f64(p.mlp_b2)
    return slots, attn


class TestForward:
    def test_single_slot_mask_all_ones(self):
        p = make_params(1, n_slots=1, d_in=3, d_slot=4, iterations=2)
        rng = engine.rng_for(1, "inputs")
        _, mask = slot_attention_forward(engine.normal(rng, (6, 3)), p)
        np.testing.assert_allclose(mask.weights, 1.0, atol=1e-7)

    @pytest.mark.parametrize("iterations", [1, 2, 3, 4])
    def test_mask_rows_sum_to_one(self, iterations):
        p = make_params(2, n_slots=5, d_in=4, d_slot=6, iterations=iterations)
        rng = engine.rng_for(2, "inputs", iterations)
        _, mask = slot_attention_forward(engine.normal(rng, (9, 4)), p)
        np.testing.assert_allclose(mask.weights.sum(axis=1), 1.0, atol=1e-5)
        assert mask.weights.min() >= 0.0 and mask.weights.max() <= 1.0

    def test_single_iteration_matches_scalar_trace(self):
        p = make_params(3, n_slots=2, d_in=2, d_slot=2, iterations=1)
        inputs = np.array([[0.9, -0.5], [-0.3, 0.8]], dtype=np.float32)
        slots, mask = slot_attention_forward(inputs, p)
        want_slots, want_attn = _trace_forward(inputs, p)
        np.testing.assert_allclose(slots.data, want_slots, atol=1e-5)
        np.testing.assert_allclose(mask.weights, want_attn, atol=1e-5)

    def test_multi_iteration_matches_scalar_trace(self):
        p = make_params(4, n_slots=3, d_in=4, d_slot=5, iterations=3)
        rng = engine.rng_for(4, "inputs")
        inputs = engine.normal(rng, (7, 4))
        slots, mask = slot_attention_forward(inputs, p)
        want_slots, want_attn = _trace_forward(inputs, p)
        np.testing.assert_allclose(slots.data, want_slots, atol=1e-4)
        np.testing.assert_allclose(mask.weights, want_attn, atol=1e-4)

    def test_rejects_bad_rank(self):
        p = make_params(5, n_slots=2, d_in=3, d_slot=4)
        with pytest.raises(engine.ShapeError):
            slot_attention_forward(np.zeros((2, 2, 3), dtype=np.float32), p)


class TestPermutationEquivariance:
    def test_identity_perm(self):
        p = make_params(6, n_slots=4, d_in=3, d_slot=4)
        rng = engine.rng_for(6, "inputs")
        assert permute_slots_check(engine.normal(rng, (8, 3)), p, [0, 1, 2, 3])

    def test_swap_outer_slots(self):
        p = make_params(7, n_slots=3, d_in=3, d_slot=4)
        rng = engine.rng_for(7, "inputs")
        assert permute_slots_check(engine.normal(rng, (8, 3)), p, [2, 1, 0])

    def test_random_pairs(self):
        for i in range(12):
            rng = engine.rng_for(8, "perm", i)
            n = int(rng.integers(2, 6))
            p = make_params(800 + i, n_slots=n, d_in=3, d_slot=4)
            perm = rng.permutation(n)
            inputs = engine.normal(rng, (int(rng.integers(2, 10)), 3))
            assert permute_slots_check(inputs, p, perm)

    def test_rejects_non_permutation(self):
        p = make_params(9, n_slots=3, d_in=3, d_slot=4)
        with pytest.raises(ValueError):
            permute_slots_check(np.zeros((2, 3), dtype=np.float32), p, [0, 0, 1])


class TestConvexHull:
    def test_updates_stay_in_value_hull_without_eps(self):
        # with exact renormalization each slot update is a convex combination
        for i in range(8):
            p = make_params(40 + i, n_slots=3, d_in=4, d_slot=4)
            p.eps = 0.0
            rng = engine.rng_for(40, "hull", i)
            inputs = engine.normal(rng, (10, 4))
            _, mask = slot_attention_forward(inputs, p)
            if mask.weights.sum(axis=0).min() <= 1e-6:
                continue
            xn = _ln64(inputs)
            v = xn @ np.asarray(p.wv.data, dtype=np.float64)
            weights = mask.weights / mask.weights.sum(axis=0, keepdims=True)
            updates = weights.T @ v
            lo, hi = v.min(axis=0), v.max(axis=0)
            assert np.all(updates >= lo - 1e-5) and np.all(updates <= hi + 1e-5)


class TestSetFunction:
    def test_input_order_only_permutes_mask_rows(self):
        p = make_params(10, n_slots=3, d_in=4, d_slot=4)
        rng = engine.rng_for(10, "inputs")
        inputs = engine.normal(rng, (9, 4))
        perm = engine.rng_for(10, "perm").permutation(9)
        slots_a, mask_a = slot_attention_forward(inputs, p)
        slots_b, mask_b = slot_attention_forward(inputs[perm], p)
        np.testing.assert_allclose(slots_a.data, slots_b.data, atol=1e-5)
        np.testing.assert_allclose(mask_a.weights[perm], mask_b.weights, atol=1e-5)


class TestGradients:
    def test_full_unroll_finite_differences(self):
        p = make_params(11, n_slots=2, d_in=3, d_slot=4, iterations=3)
        # check at a generic parameter point: the 0.02-scale slot initializers
        # sit in a region whose curvature swamps an h=1e-3 central difference
        p.slots.data = engine.normal(engine.rng_for(11, "slot-point"), (2, 4), std=0.5)
        rng = engine.rng_for(11, "inputs")
        x = Value(engine.normal(rng, (5, 3)), requires_grad=True)
        probe = engine.normal(engine.rng_for(11, "probe"), (2, 4))
        params = [x, p.slots, p.wq, p.wk, p.wv, p.gru.wz, p.gru.uh, p.mlp_w1, p.mlp_w2, p.in_norm_g]

        def build():
            slots, _ = forward_batch(x.reshape((1, 5, 3)), p)
            return engine.mul(slots.reshape((2, 4)), probe).mean()

        ok, total = fd_check(build, params, engine.rng_for(11, "pick"), coords_per_param=5)
        assert ok / total >= 0.95


class TestBatchedConsistency:
    def test_batch_matches_per_instance(self):
        p = make_params(12, n_slots=3, d_in=3, d_slot=4)
        rng = engine.rng_for(12, "inputs")
        batch = engine.normal(rng, (4, 6, 3))
        slots_b, attn_b = forward_batch(Value(batch), p)
        for i in range(4):
            slots_i, mask_i = slot_attention_forward(batch[i], p)
            np.testing.assert_allclose(slots_b.data[i], slots_i.data, atol=1e-5)
            np.testing.assert_allclose(attn_b.data[i], mask_i.weights, atol=1e-5)


class TestMaskTypes:
    def test_layout_validation(self):
        with pytest.raises(ValueError):
            MaskLayout("diagonal", (2, 2))

    def test_mask_must_be_2d(self):
        with pytest.raises(engine.ShapeError):
            AttentionMask(np.zeros((2, 2, 2)))

    def test_initial_slots_distinct(self):
        p = make_params(13, n_slots=8, d_in=3, d_slot=16)
        s = p.slots.data
        for i in range(8):
            for j in range(i + 1, 8):
                assert np.linalg.norm(s[i] - s[j]) > 0.0
