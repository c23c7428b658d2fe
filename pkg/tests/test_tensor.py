"""Autodiff engine: op semantics, gradients against finite differences,
graph mechanics (fan-out, accumulation, detach, no_grad), and the
structured-indexing ops used by the masking pipeline."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voximage.errors import NumericalError, ShapeError
from voximage.rng import make_rng
from voximage.tensor import (Tensor, backward, concat, embedding, exp, gelu,
                             grad_check, im2col, layernorm, log, logsumexp,
                             matmul, narrow, no_grad, scatter_tokens,
                             set_finite_check, softmax, sqrt, take_per_row,
                             take_tokens, tmean, topo_order, tsum,
                             upsample_nearest2x)


def fd_grad(loss_fn, x, h=1e-6):
    """Central-difference gradient of a scalar loss w.r.t. array x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        hi = loss_fn()
        flat[i] = old - h
        lo = loss_fn()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_op_grad(build_loss, arrays, rtol=1e-6, atol=1e-9):
    """build_loss(tensors) -> Tensor scalar; checks every input's gradient."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    backward(loss)
    for t, a in zip(tensors, arrays):
        want = fd_grad(lambda: build_loss(*[Tensor(x) for x in arrays]).item(), a)
        np.testing.assert_allclose(t.grad, want, rtol=rtol, atol=atol)


class TestArithmetic:
    def test_add_mul_values(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        np.testing.assert_allclose((Tensor(a) + Tensor(b)).data, a + b)
        np.testing.assert_allclose((Tensor(a) * Tensor(b)).data, a * b)
        np.testing.assert_allclose((Tensor(a) - Tensor(b)).data, a - b)
        np.testing.assert_allclose((Tensor(a) / Tensor(np.abs(b) + 1)).data,
                                   a / (np.abs(b) + 1))

    def test_scalar_operands(self, rng):
        a = rng.standard_normal((2, 3))
        np.testing.assert_allclose((Tensor(a) * 2.0).data, a * 2)
        np.testing.assert_allclose((Tensor(a) + 1.0).data, a + 1)
        np.testing.assert_allclose((2.0 * Tensor(a)).data, 2 * a)
        np.testing.assert_allclose((1.0 - Tensor(a)).data, 1 - a)

    def test_grads(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4)) + 2.0
        check_op_grad(lambda x, y: tmean(x * y + x / y - y), [a, b])

    def test_power_grad(self, rng):
        a = rng.standard_normal((4, 3))
        check_op_grad(lambda x: tmean(x ** 3), [a])

    def test_exp_log_sqrt_grads(self, rng):
        a = np.abs(rng.standard_normal((3, 3))) + 0.5
        check_op_grad(lambda x: tmean(exp(x) + log(x) + sqrt(x)), [a])

    def test_broadcast_values_and_grads(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((1, 4))
        c = rng.standard_normal(())
        check_op_grad(lambda x, y, z: tmean(x * y + z), [a, b, c])

    def test_unbroadcast_row_and_col(self, rng):
        a = rng.standard_normal((3, 4))
        row = rng.standard_normal(4)
        ta, tr = Tensor(a, requires_grad=True), Tensor(row, requires_grad=True)
        backward(tsum(ta + tr))
        np.testing.assert_allclose(ta.grad, np.ones((3, 4)))
        np.testing.assert_allclose(tr.grad, np.full(4, 3.0))


class TestGraphMechanics:
    def test_fanout_accumulates(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        backward(tsum(x + x))
        np.testing.assert_allclose(x.grad, 2.0)

    def test_diamond_graph(self, rng):
        x = Tensor(np.array(2.0), requires_grad=True)
        a = x * 3.0
        b = x * 4.0
        backward(a * b)  # d/dx (12 x^2) = 24 x = 48
        np.testing.assert_allclose(x.grad, 48.0)

    def test_grads_accumulate_across_backwards(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        backward(tsum(x * 2.0))
        backward(tsum(x * 3.0))
        np.testing.assert_allclose(x.grad, 5.0)

    def test_backward_requires_scalar(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(x * 1.0)

    def test_no_grad_blocks_graph(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert y._parents == ()
        assert not y.requires_grad

    def test_detach(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        y = tsum(x.detach() * 3.0 + x)
        backward(y)
        np.testing.assert_allclose(x.grad, 1.0)

    def test_topo_order_parents_first(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x * 2.0
        z = y + x
        order = topo_order(z)
        assert order.index(x) < order.index(y) < order.index(z)

    def test_no_grad_into_non_required_leaves(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        c = Tensor(rng.standard_normal(3))
        backward(tsum(x * c))
        assert c.grad is None

    def test_finite_check_raises(self, rng):
        set_finite_check("full")
        try:
            x = Tensor(np.array([1.0, 0.0]))
            with np.errstate(divide="ignore"), pytest.raises(NumericalError):
                _ = Tensor(np.array([1.0, 1.0])) / x
        finally:
            set_finite_check("sample")


class TestReductionsAndShapes:
    def test_sum_axes(self, rng):
        a = rng.standard_normal((2, 3, 4))
        np.testing.assert_allclose(tsum(Tensor(a), axis=1).data, a.sum(1))
        np.testing.assert_allclose(tsum(Tensor(a), axis=(0, 2)).data, a.sum((0, 2)))
        np.testing.assert_allclose(
            tsum(Tensor(a), axis=2, keepdims=True).data, a.sum(2, keepdims=True))

    def test_mean_grad(self, rng):
        a = rng.standard_normal((3, 5))
        check_op_grad(lambda x: tmean(x), [a])
        check_op_grad(lambda x: tsum(tmean(x, axis=1) ** 2), [a])

    def test_reshape_transpose_grads(self, rng):
        a = rng.standard_normal((2, 3, 4))
        check_op_grad(lambda x: tmean(x.reshape((6, 4)) ** 2), [a])
        check_op_grad(lambda x: tmean(x.transpose((2, 0, 1)) ** 2), [a])

    def test_concat_values_and_grads(self, rng):
        a = rng.standard_normal((2, 3))
        b = rng.standard_normal((2, 5))
        got = concat([Tensor(a), Tensor(b)], axis=1)
        np.testing.assert_allclose(got.data, np.concatenate([a, b], 1))
        check_op_grad(lambda x, y: tmean(concat([x, y], axis=1) ** 2), [a, b])

    def test_narrow(self, rng):
        a = rng.standard_normal((3, 8))
        got = narrow(Tensor(a), axis=1, start=2, length=4)
        np.testing.assert_allclose(got.data, a[:, 2:6])
        check_op_grad(lambda x: tmean(narrow(x, 1, 2, 4) ** 2), [a])


class TestMatmul:
    def test_values(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 5))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_batched_values(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 5))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_grads_analytic(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 5))
        ta = Tensor(a, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        backward(tsum(matmul(ta, tb)))
        np.testing.assert_allclose(ta.grad, np.ones((3, 5)) @ b.T, rtol=1e-12)
        np.testing.assert_allclose(tb.grad, a.T @ np.ones((3, 5)), rtol=1e-12)

    def test_broadcast_batch_grad(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 5))  # shared across the batch
        check_op_grad(lambda x, y: tmean(matmul(x, y) ** 2), [a, b])

    def test_inner_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            matmul(Tensor(rng.standard_normal((2, 3))),
                   Tensor(rng.standard_normal((4, 5))))


class TestKernelBackedOps:
    def test_softmax_grad(self, rng):
        a = rng.standard_normal((2, 3, 4))
        check_op_grad(lambda x: tmean(softmax(x) ** 2), [a])

    def test_logsumexp_grad(self, rng):
        a = rng.standard_normal((3, 5))
        check_op_grad(lambda x: tmean(logsumexp(x)), [a])

    def test_logsumexp_drops_last_axis(self, rng):
        a = rng.standard_normal((3, 5))
        assert logsumexp(Tensor(a)).data.shape == (3,)

    def test_layernorm_grad(self, rng):
        a = rng.standard_normal((4, 6))
        gamma = rng.standard_normal(6)
        beta = rng.standard_normal(6)
        check_op_grad(
            lambda x, g, b: tmean(layernorm(x, g, b) ** 2), [a, gamma, beta])

    def test_gelu_grad(self, rng):
        a = rng.standard_normal((3, 4))
        check_op_grad(lambda x: tmean(gelu(x) ** 2), [a])


class TestIndexingOps:
    def test_take_tokens_values(self, rng):
        a = rng.standard_normal((2, 5, 3))
        idx = np.array([[0, 2], [4, 1]])
        got = take_tokens(Tensor(a), idx)
        np.testing.assert_allclose(got.data[0], a[0, [0, 2]])
        np.testing.assert_allclose(got.data[1], a[1, [4, 1]])

    def test_take_tokens_grad(self, rng):
        a = rng.standard_normal((2, 5, 3))
        idx = np.array([[0, 2], [4, 1]])
        check_op_grad(lambda x: tmean(take_tokens(x, idx) ** 2), [a])

    def test_scatter_tokens_semantics(self, rng):
        base = np.zeros((1, 4, 2))
        rows = rng.standard_normal((1, 2, 2))
        idx = np.array([[1, 3]])
        got = scatter_tokens(Tensor(base), idx, Tensor(rows))
        np.testing.assert_allclose(got.data[0, 1], rows[0, 0])
        np.testing.assert_allclose(got.data[0, 3], rows[0, 1])
        np.testing.assert_allclose(got.data[0, 0], 0.0)
        np.testing.assert_allclose(got.data[0, 2], 0.0)

    def test_scatter_tokens_grads(self, rng):
        base = rng.standard_normal((2, 4, 3))
        rows = rng.standard_normal((2, 2, 3))
        idx = np.array([[0, 2], [1, 3]])
        check_op_grad(
            lambda b, r: tmean(scatter_tokens(b, idx, r) ** 2), [base, rows])

    def test_scatter_then_take_roundtrip(self, rng):
        base = rng.standard_normal((1, 6, 2))
        rows = rng.standard_normal((1, 3, 2))
        idx = np.array([[5, 0, 2]])
        scattered = scatter_tokens(Tensor(base), idx, Tensor(rows))
        back = take_tokens(scattered, idx)
        np.testing.assert_allclose(back.data, rows)

    def test_embedding_values_and_grad(self, rng):
        table = rng.standard_normal((7, 4))
        idx = np.array([1, 1, 6, 0])
        got = embedding(Tensor(table), idx)
        np.testing.assert_allclose(got.data, table[idx])
        t = Tensor(table, requires_grad=True)
        backward(tsum(embedding(t, idx)))
        want = np.zeros((7, 4))
        np.add.at(want, idx, 1.0)
        np.testing.assert_allclose(t.grad, want)

    def test_take_per_row(self, rng):
        a = rng.standard_normal((3, 5))
        idx = np.array([4, 0, 2])
        got = take_per_row(Tensor(a), idx)
        np.testing.assert_allclose(got.data, a[np.arange(3), idx])
        check_op_grad(lambda x: tmean(take_per_row(x, idx) ** 2), [a])

    def test_upsample_nearest2x(self, rng):
        a = rng.standard_normal((1, 2, 3, 3))
        got = upsample_nearest2x(Tensor(a))
        assert got.data.shape == (1, 2, 6, 6)
        np.testing.assert_allclose(got.data[0, 0, :2, :2], a[0, 0, 0, 0])
        check_op_grad(lambda x: tmean(upsample_nearest2x(x) ** 2), [a])

    def test_im2col_conv_matches_naive(self, rng):
        """im2col + matmul equals a direct nested-loop convolution."""
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((3 * 3 * 3, 4))  # k=3, cout=4
        cols = im2col(Tensor(x), 3, 1, 1)
        out = matmul(cols, Tensor(w)).data  # [B, 25, 4]

        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        naive = np.zeros((2, 5, 5, 4))
        for b in range(2):
            for oy in range(5):
                for ox in range(5):
                    patch = xp[b, :, oy:oy + 3, ox:ox + 3].reshape(-1)
                    naive[b, oy, ox] = patch @ w
        np.testing.assert_allclose(out.reshape(2, 5, 5, 4), naive, rtol=1e-12)

    def test_im2col_grad(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        check_op_grad(lambda t: tmean(im2col(t, 3, 1, 1) ** 2), [x])


class TestHypothesisProperties:
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
    @settings(max_examples=20, deadline=None)
    def test_matmul_grad_any_shape(self, m, k, n):
        rng = make_rng(m * 100 + k * 10 + n)
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        ta = Tensor(a, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        backward(tsum(matmul(ta, tb)))
        np.testing.assert_allclose(ta.grad, np.ones((m, n)) @ b.T,
                                   rtol=1e-11, atol=1e-12)
        np.testing.assert_allclose(tb.grad, a.T @ np.ones((m, n)),
                                   rtol=1e-11, atol=1e-12)

    @given(st.sampled_from([(3, 4), (1, 4), (3, 1), (4,), (1,), ()]))
    @settings(max_examples=12, deadline=None)
    def test_broadcast_grad_shapes(self, shape_b):
        rng = make_rng(hash(shape_b) % 2**31)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal(shape_b)
        ta = Tensor(a, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        backward(tsum(ta * tb))
        assert ta.grad.shape == a.shape
        assert tb.grad.shape == b.shape
        want = fd_grad(lambda: float(np.sum(a * b)), b)
        np.testing.assert_allclose(tb.grad, want, rtol=1e-6, atol=1e-9)

    @given(st.floats(-3, 3), st.floats(-3, 3))
    @settings(max_examples=25, deadline=None)
    def test_scalar_chain_rule(self, x0, y0):
        x = Tensor(np.array(x0), requires_grad=True)
        y = Tensor(np.array(y0), requires_grad=True)
        backward((x * y + x) * (x + 2.0))
        # d/dx [(xy + x)(x + 2)] = (y + 1)(x + 2) + (xy + x)
        np.testing.assert_allclose(x.grad, (y0 + 1) * (x0 + 2) + (x0 * y0 + x0),
                                   rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(y.grad, x0 * (x0 + 2), rtol=1e-12, atol=1e-12)


class TestGradCheckHarness:
    def test_passes_on_correct_graph(self, rng):
        a = rng.standard_normal((3, 4))
        p = Tensor(rng.standard_normal((4, 2)), requires_grad=True)

        def loss_fn():
            return tmean(softmax(matmul(Tensor(a), p)) ** 2)

        report = grad_check(loss_fn, {"p": p})
        assert report.ok(1e-6)
        assert report.worst_param == "p"

    def test_catches_broken_gradient(self, rng):
        p = Tensor(rng.standard_normal(4), requires_grad=True)

        def loss_fn():
            out = p * 2.0
            # Deliberately corrupt the recorded backward rule.
            if out._bwd is not None:
                orig = out._bwd
                out._bwd = lambda g: [x * 0.5 for x in orig(g)]
            return tsum(out)

        report = grad_check(loss_fn, {"p": p})
        assert not report.ok(1e-4)
