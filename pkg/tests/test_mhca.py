"""Cross-attention alignment, its loss and the attention/entropic-plan equivalence."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetdistill import tensor as T
from hetdistill.errors import DimensionError, InputError
from hetdistill.gradcheck import finite_diff_check
from hetdistill.mhca import MhcaParams, eot_equivalence_check, init_mhca, mhca_forward, mhca_loss
from hetdistill.tensor import Tensor


def direct_mhca(hs, ht, p: MhcaParams):
    """Element-by-element evaluation of the per-head attention formula."""
    B, Ls, _ = hs.shape
    Lt = ht.shape[1]
    h, dk = p.heads, p.head_dim
    wq, wk, wv, wo = (w.data for w in (p.w_q, p.w_k, p.w_v, p.w_o))
    out = np.zeros((B, Ls, wo.shape[1]))
    weights = np.zeros((B, h, Ls, Lt))
    for b in range(B):
        concat = np.zeros((Ls, h * dk))
        for i in range(h):
            cols = slice(i * dk, (i + 1) * dk)
            q, k, v = hs[b] @ wq[:, cols], ht[b] @ wk[:, cols], ht[b] @ wv[:, cols]
            for m in range(Ls):
                logits = [float(q[m] @ k[n]) / math.sqrt(dk) for n in range(Lt)]
                top = max(logits)
                e = [math.exp(x - top) for x in logits]
                z = sum(e)
                for n in range(Lt):
                    weights[b, i, m, n] = e[n] / z
                    concat[m, cols] += weights[b, i, m, n] * v[n]
        out[b] = concat @ wo
    return out, weights


@pytest.fixture
def instance(rng):
    hs = rng.standard_normal((2, 3, 8))
    ht = rng.standard_normal((2, 5, 12))
    return hs, ht, init_mhca(8, 12, heads=2, head_dim=4, seed=1)


class TestMhcaForward:
    def test_direct_formula(self, instance):
        hs, ht, p = instance
        out, w = mhca_forward(hs, ht, p, return_weights=True)
        ref_out, ref_w = direct_mhca(hs, ht, p)
        assert np.abs(w.data.sum(-1) - 1.0).max() <= 1e-12
        assert np.abs(w.data - ref_w).max() <= 1e-12
        assert np.abs(out.data - ref_out).max() <= 1e-12

    def test_single_teacher_token_ignores_queries(self, rng):
        p = init_mhca(8, 12, heads=2, head_dim=4, seed=2)
        ht = rng.standard_normal((1, 1, 12))
        a = mhca_forward(rng.standard_normal((1, 3, 8)), ht, p, return_weights=True)
        b = mhca_forward(rng.standard_normal((1, 3, 8)), ht, p)
        np.testing.assert_array_equal(a[1].data, np.ones((1, 2, 3, 1)))
        expected = (ht[0] @ p.w_v.data) @ p.w_o.data
        np.testing.assert_allclose(a[0].data[0], np.repeat(expected, 3, axis=0), atol=1e-14)
        np.testing.assert_allclose(a[0].data, b.data, atol=1e-14)

    def test_constant_teacher_equals_one_token_teacher(self, rng, instance):
        hs, _, p = instance
        row = rng.standard_normal(12)
        many = mhca_forward(hs, np.tile(row, (2, 5, 1)), p).data
        one = mhca_forward(hs, np.tile(row, (2, 1, 1)), p).data
        np.testing.assert_allclose(many, one, atol=1e-13)

    def test_output_in_convex_hull_per_head(self, instance):
        hs, ht, p = instance
        _, w = mhca_forward(hs, ht, p, return_weights=True)
        assert (w.data >= 0).all()
        # per head, the pre-projection output is w @ (H_t W_v); reconstruct it and compare
        dk = p.head_dim
        for i in range(p.heads):
            v = ht @ p.w_v.data[:, i * dk:(i + 1) * dk]
            head = np.einsum("bmn,bnd->bmd", w.data[:, i], v)
            lo, hi = v.min(axis=1, keepdims=True), v.max(axis=1, keepdims=True)
            assert ((head >= lo - 1e-9) & (head <= hi + 1e-9)).all()

    def test_teacher_permutation_leaves_loss_unchanged(self, rng, instance):
        hs, ht, p = instance
        perm = rng.permutation(5)
        a = mhca_loss(hs, mhca_forward(hs, ht, p)).item()
        b = mhca_loss(hs, mhca_forward(hs, ht[:, perm], p)).item()
        assert abs(a - b) <= 1e-9

    @pytest.mark.parametrize("hs_shape,ht_shape", [((2, 3, 7), (2, 5, 12)), ((2, 3, 8), (2, 5, 11)),
                                                   ((1, 3, 8), (2, 5, 12)), ((3, 8), (5, 12))])
    def test_shape_errors(self, hs_shape, ht_shape):
        p = init_mhca(8, 12, heads=2, head_dim=4)
        with pytest.raises(DimensionError):
            mhca_forward(np.ones(hs_shape), np.ones(ht_shape), p)

    def test_default_head_width(self):
        p = init_mhca(48, 96)
        assert (p.heads, p.head_dim) == (8, 6)
        with pytest.raises(InputError):
            init_mhca(50, 96, heads=8)

    def test_params_validate_widths(self):
        p = init_mhca(8, 12, heads=2, head_dim=4)
        with pytest.raises(DimensionError):
            MhcaParams(p.w_q, p.w_k, p.w_v, p.w_o, heads=4, head_dim=4)

    def test_seeded_init_is_reproducible(self):
        a, b = init_mhca(8, 12, seed=5, heads=2), init_mhca(8, 12, seed=5, heads=2)
        for k in a.parameters():
            assert a.parameters()[k].data.tobytes() == b.parameters()[k].data.tobytes()
            assert np.abs(a.parameters()[k].data).max() <= 1 / math.sqrt(a.parameters()[k].shape[0])


class TestMhcaLoss:
    def test_exact_match_is_zero(self, rng):
        x = rng.standard_normal((2, 3, 4))
        assert mhca_loss(x, x).item() == 0.0

    def test_no_division_by_width(self):
        assert mhca_loss(np.zeros((1, 1, 2)), np.ones((1, 1, 2))).item() == 2.0

    def test_direct_sum(self, rng):
        a, b = rng.standard_normal((3, 4, 5)), rng.standard_normal((3, 4, 5))
        expected = sum(((a[i, j] - b[i, j]) ** 2).sum() for i in range(3) for j in range(4)) / 12
        assert abs(mhca_loss(a, b).item() - expected) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mhca_loss(np.ones((1, 2, 3)), np.ones((1, 3, 3)))

    def test_gradients_all_leaves(self, rng, instance):
        hs, ht, p = instance
        hs = Tensor(hs, requires_grad=True)
        for leaf in [hs, *p.parameters().values()]:
            rep = finite_diff_check(lambda _x: mhca_loss(hs, mhca_forward(hs, ht, p)), leaf)
            assert rep.max_rel_error <= 1e-4

    def test_detached_query_blocks_query_path(self, instance):
        hs, ht, p = instance
        hs = Tensor(hs, requires_grad=True)
        (g_full,) = T.gradients(mhca_forward(hs, ht, p).sum(), [hs])
        (g_det,) = T.gradients(mhca_forward(hs, ht, p, detach_query=True).sum(), [hs])
        assert np.abs(g_full).max() > 0
        np.testing.assert_array_equal(g_det, np.zeros_like(g_det))


class TestEotEquivalence:
    def test_hundred_seeds(self):
        worst = 0.0
        for seed in range(100):
            r = np.random.default_rng(seed)
            dk = int(r.integers(1, 9))
            Q, K = r.standard_normal((4, dk)), r.standard_normal((6, dk))
            rep = eot_equivalence_check(Q, K, r.standard_normal((6, 3)))
            worst = max(worst, rep.max_weight_deviation, rep.max_projection_deviation)
            assert rep.epsilon_used == math.sqrt(dk)
        assert worst <= 1e-12

    def test_single_key(self, rng):
        rep = eot_equivalence_check(rng.standard_normal((3, 4)), rng.standard_normal((1, 4)),
                                    rng.standard_normal((1, 2)))
        assert rep.max_weight_deviation == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_large_logits(self, seed):
        r = np.random.default_rng(seed)
        Q = r.choice([-50.0, 50.0], size=(3, 4))
        K = r.choice([-50.0, 50.0], size=(5, 4))
        rep = eot_equivalence_check(Q, K, r.standard_normal((5, 2)))
        assert rep.max_weight_deviation <= 1e-9 and rep.max_projection_deviation <= 1e-9

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            eot_equivalence_check(np.ones((2, 3)), np.ones((4, 2)), np.ones((4, 2)))
        with pytest.raises(DimensionError):
            eot_equivalence_check(np.ones((2, 3)), np.ones((4, 3)), np.ones((3, 2)))
