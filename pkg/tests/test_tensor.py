"""Tape autodiff: primitive values, gradients and the finite-difference checker."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hetdistill import tensor as T
from hetdistill.errors import ContractError, DimensionError, EvaluationError, InputError
from hetdistill.gradcheck import finite_diff_check
from hetdistill.tensor import Tensor, gradients, no_grad


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        eye = np.eye(2)
        np.testing.assert_array_equal((Tensor(eye) @ Tensor(eye)).data, eye)

    def test_hand_example(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_random_against_triple_loop(self, rng):
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
        assert np.abs((Tensor(a) @ Tensor(b)).data - triple_loop_matmul(a, b)).max() <= 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31 - 1))
    def test_triple_loop_up_to_16(self, m, k, n, seed):
        r = np.random.default_rng(seed)
        a, b = r.standard_normal((m, k)), r.standard_normal((k, n))
        assert np.abs((Tensor(a) @ Tensor(b)).data - triple_loop_matmul(a, b)).max() <= 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmaxRows:
    def test_uniform_row(self):
        np.testing.assert_allclose(T.softmax_rows(np.zeros((1, 3))).data, [[1 / 3] * 3], atol=1e-15)

    def test_no_overflow(self):
        out = T.softmax_rows(np.array([[1000.0, 0.0]])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(T.softmax_rows(x[None]).data[0], expected, rtol=0, atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        p = T.softmax_rows(x).data
        assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-12
        assert (p >= 0).all()
        assert np.abs(T.softmax_rows(x + c).data - p).max() <= 1e-12

    def test_requires_matrix(self):
        with pytest.raises(DimensionError):
            T.softmax_rows(np.zeros(3))


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(T.l2_normalize_rows(np.array([[3.0, 4.0]])).data, [[0.6, 0.8]])

    def test_zero_row_stays_zero(self):
        out = T.l2_normalize_rows(np.zeros((1, 4)), floor=1e-12).data
        np.testing.assert_array_equal(out, np.zeros((1, 4)))

    def test_random_rows_unit_norm(self, rng):
        out = T.l2_normalize_rows(rng.standard_normal((6, 7))).data
        assert np.abs(np.linalg.norm(out, axis=1) - 1.0).max() <= 1e-12

    def test_floor_must_be_positive(self):
        with pytest.raises(ContractError):
            T.l2_normalize_rows(np.ones((1, 2)), floor=0.0)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_inner_product_gives_two_x(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=0)

    def test_repeated_backward_accumulates(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()
        with pytest.raises(ContractError):
            gradients(x * 2.0, [x])

    def test_constant_graph_has_zero_gradient(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        c = Tensor(rng.standard_normal(4))
        (grad,) = gradients((c * c).sum(), [x])
        np.testing.assert_array_equal(grad, np.zeros(4))

    def test_unused_leaf_gets_zeros(self, rng):
        x = Tensor(rng.standard_normal(2), requires_grad=True)
        y = Tensor(rng.standard_normal(3), requires_grad=True)
        gx, gy = gradients((x * x).sum(), [x, y])
        np.testing.assert_array_equal(gy, np.zeros(3))

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = (x * 3.0).sum()
        assert not y.requires_grad

    def test_broadcast_gradient_is_reduced(self):
        x = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.arange(4.0), requires_grad=True)
        gx, gb = gradients(((x + b) * (x + b)).sum(), [x, b])
        np.testing.assert_allclose(gb, 2 * 3 * (1 + np.arange(4.0)))
        assert gx.shape == (3, 4)


def _check(f, x, **kw):
    return finite_diff_check(lambda t: f(t), Tensor(x, requires_grad=True), **kw)


class TestPrimitiveGradients:
    """Every differentiable primitive against central differences at step 1e-5."""

    @pytest.mark.parametrize("name,f", [
        ("exp", lambda t: T.exp(t).sum()),
        ("log", lambda t: T.log(t * t + 1.0).sum()),
        ("sqrt", lambda t: T.sqrt(t * t + 0.5).sum()),
        ("power", lambda t: ((t * t + 1.0) ** 1.5).sum()),
        ("div", lambda t: (1.0 / (t * t + 1.0)).sum()),
        ("softplus", lambda t: T.softplus(t).sum()),
        ("relu", lambda t: (T.relu(t) * t).sum()),
        ("softmax", lambda t: (T.softmax(t, axis=-1) * Tensor(np.arange(12.0).reshape(3, 4))).sum()),
        ("logsumexp", lambda t: T.logsumexp(t, axis=0).sum()),
        ("l2_normalize", lambda t: (T.l2_normalize(t) * Tensor(np.arange(12.0).reshape(3, 4))).sum()),
        ("mean", lambda t: (t.mean(axis=1) ** 2).sum()),
        ("transpose", lambda t: (t.T @ t).sum()),
        ("reshape", lambda t: (t.reshape(4, 3) @ t).sum()),
        ("getitem", lambda t: (t[1:, ::2] * t[:2, 1::2]).sum()),
        ("concat", lambda t: (T.concat([t, t * t], axis=1) ** 2).sum()),
        ("clamp_min", lambda t: T.clamp_min(t, 0.1).sum()),
    ])
    def test_primitive(self, rng, name, f):
        x = rng.standard_normal((3, 4))
        x[np.abs(x) < 0.2] += 0.5  # keep kinks of relu and clamp away from the stencil
        rep = _check(f, x)
        assert rep.max_rel_error <= 1e-4, name


class TestFiniteDiffCheck:
    def test_sum_has_zero_error(self, rng):
        rep = _check(lambda t: t.sum(), rng.standard_normal((3, 2)))
        assert rep.max_rel_error <= 1e-9
        assert rep.passed

    def test_detects_wrong_gradient(self, rng):
        def bad_square(t):
            return Tensor._result((t.data ** 2).sum(), (t,), lambda g: (g * t.data,), "bad")
        rep = _check(bad_square, rng.standard_normal(4) + 3.0)
        assert not rep.passed
        assert rep.max_rel_error == pytest.approx(0.5, rel=1e-6)

    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_non_finite_objective(self):
        with pytest.raises(EvaluationError):
            _check(lambda t: T.log(t).sum(), np.array([-1.0, 1.0]))

    def test_step_range(self):
        with pytest.raises(InputError):
            _check(lambda t: t.sum(), np.ones(2), step=0.1)

    def test_restores_input(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        before = x.data.copy()
        finite_diff_check(lambda t: (t * t).sum(), x)
        np.testing.assert_array_equal(x.data, before)

    def test_scale_floor_tames_tiny_coordinates(self):
        # one coordinate carries a gradient 1e-9 of the other; its error is pure roundoff
        w = np.array([1.0, 1e-9])
        def f(t):
            return (t * t * Tensor(w)).sum()
        plain = _check(f, np.array([0.3, 0.3]), floor=1e-30)
        scaled = _check(f, np.array([0.3, 0.3]), floor=1e-30, scale_floor=1e-3)
        assert scaled.max_rel_error <= plain.max_rel_error
        assert scaled.max_abs_error == plain.max_abs_error
