"""Tensor engine: primitive semantics, backward rules, finite-difference checks."""

import math

import numpy as np
import pytest

import mvshape.autodiff as ad
from mvshape.errors import NonFiniteValue, NonScalarLoss, ShapeMismatch


def rand(shape, seed, scale=1.0):
    return np.random.default_rng(seed).normal(0.0, scale, size=shape)


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def check_grad(build, x_data, tol=1e-3, h=1e-5):
    """build(tensor) -> scalar Tensor; compares backward to central differences."""
    x = ad.Tensor(x_data, requires_grad=True, dtype=np.float64)
    loss = build(x)
    ad.backward(loss)
    numeric = ad.finite_diff_grad(lambda t: build(t), ad.Tensor(x_data, dtype=np.float64), h=h)
    assert rel_err(x.grad, numeric) < tol


class TestForward:
    def test_matmul_identity(self):
        a = rand((3, 3), 0)
        out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(a))
        np.testing.assert_allclose(out.data, a)

    def test_l2_normalize_345(self):
        out = ad.l2_normalize(ad.Tensor([[3.0, 4.0]]), axis=1)
        np.testing.assert_allclose(out.data, [[0.6, 0.8]])

    def test_logsumexp_large_inputs(self):
        out = ad.logsumexp(ad.Tensor([1000.0, 1000.0]), axis=0)
        assert out.item() == pytest.approx(1000.0 + math.log(2), abs=1e-9)

    def test_softmax_rows_sum_to_one(self):
        x = ad.Tensor(rand((5, 7), 1, scale=3.0))
        s = ad.softmax(x, axis=1)
        np.testing.assert_allclose(s.data.sum(axis=1), np.ones(5), atol=1e-6)

    def test_l2_normalize_unit_norms(self):
        z = ad.l2_normalize(ad.Tensor(rand((6, 4), 2)), axis=1)
        np.testing.assert_allclose(np.linalg.norm(z.data, axis=1), np.ones(6), atol=1e-6)

    def test_l2_normalize_zero_vector_raises(self):
        with pytest.raises(NonFiniteValue):
            ad.l2_normalize(ad.Tensor([[0.0, 0.0]]), axis=1)

    def test_non_finite_screen(self):
        with pytest.raises(NonFiniteValue):
            ad.log(ad.Tensor([-1.0]))

    def test_broadcast_suffix_only(self):
        a = ad.Tensor(rand((4, 3), 3))
        b = ad.Tensor(rand((3,), 4))
        assert ad.add(a, b).data.shape == (4, 3)
        with pytest.raises(ShapeMismatch):
            ad.add(a, ad.Tensor(rand((4, 1), 5)))

    def test_mixed_dtype_rejected(self):
        with pytest.raises(ShapeMismatch):
            ad.add(ad.Tensor([1.0], dtype=np.float32), ad.Tensor([1.0], dtype=np.float64))

    def test_backward_needs_scalar(self):
        with pytest.raises(NonScalarLoss):
            ad.backward(ad.Tensor([1.0, 2.0], requires_grad=True))


class TestBackward:
    def test_sum_of_squares(self):
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
        ad.backward(ad.tsum(ad.mul(x, x), axis=0))
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_logsumexp_grad_is_softmax(self):
        data = rand((5,), 6)
        x = ad.Tensor(data, requires_grad=True, dtype=np.float64)
        ad.backward(ad.logsumexp(x, axis=0))
        e = np.exp(data - data.max())
        np.testing.assert_allclose(x.grad, e / e.sum(), atol=1e-12)

    def test_fanout_accumulation(self):
        x = ad.Tensor(1.0, requires_grad=True, dtype=np.float64)
        ad.backward(ad.add(x, x))
        assert x.grad == pytest.approx(2.0)

    def test_off_path_leaf_gets_no_grad(self):
        x = ad.Tensor([1.0], requires_grad=True, dtype=np.float64)
        y = ad.Tensor([2.0], requires_grad=True, dtype=np.float64)
        ad.backward(ad.tsum(ad.mul(x, x), axis=0))
        assert y.grad is None

    def test_no_grad_context(self):
        x = ad.Tensor([1.0], requires_grad=True, dtype=np.float64)
        with ad.no_grad():
            out = ad.mul(x, x)
        assert out._backward is None and not out.requires_grad


class TestGradcheckPrimitives:
    """Every primitive against central differences at smooth points."""

    def test_finite_diff_square(self):
        g = ad.finite_diff_grad(lambda t: ad.tsum(ad.mul(t, t), axis=0),
                                ad.Tensor([3.0], dtype=np.float64), h=1e-3)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    @pytest.mark.parametrize("name,build,shape,scale", [
        ("add", lambda x: ad.tsum(ad.tsum(ad.add(x, ad.mul_scalar(x, 0.5)), 1), 0), (3, 4), 1.0),
        ("sub", lambda x: ad.tsum(ad.tsum(ad.sub(ad.mul_scalar(x, 2.0), x), 1), 0), (3, 4), 1.0),
        ("mul", lambda x: ad.tsum(ad.tsum(ad.mul(x, ad.add_scalar(x, 1.0)), 1), 0), (3, 4), 1.0),
        ("pow", lambda x: ad.tsum(ad.pow_scalar(x, 3.0), 0), (5,), 1.0),
        ("exp", lambda x: ad.tsum(ad.exp(x), 0), (5,), 1.0),
        ("gelu", lambda x: ad.tsum(ad.gelu(x), 0), (9,), 2.0),
        ("mean", lambda x: ad.tmean(ad.tmean(x, 1), 0), (3, 4), 1.0),
        ("transpose", lambda x: ad.tsum(ad.tsum(ad.mul(ad.transpose(x), ad.transpose(x)), 1), 0), (3, 4), 1.0),
        ("reshape", lambda x: ad.tsum(ad.mul(ad.reshape(x, (12,)), ad.reshape(x, (12,))), 0), (3, 4), 1.0),
        ("narrow", lambda x: ad.tsum(ad.tsum(ad.mul(ad.narrow(x, 1, 1, 3), ad.narrow(x, 1, 1, 3)), 1), 0), (3, 4), 1.0),
        ("softmax", lambda x: ad.tsum(ad.tsum(ad.mul(ad.softmax(x, 1), ad.softmax(x, 1)), 1), 0), (3, 4), 2.0),
        ("logsumexp", lambda x: ad.tsum(ad.logsumexp(x, 1), 0), (3, 4), 2.0),
        ("l2norm", lambda x: ad.tsum(ad.tsum(ad.pow_scalar(ad.l2_normalize(x, 1), 4.0), 1), 0), (3, 4), 1.0),
    ])
    def test_primitive_gradients(self, name, build, shape, scale):
        for seed in range(3):
            data = rand(shape, hash((name, seed)) % 2**31, scale)
            if name == "exp":
                data = np.clip(data, -3, 3)
            if name == "pow":
                data = np.abs(data) + 0.5
            check_grad(build, data)

    def test_log_gradient(self):
        data = np.abs(rand((6,), 11)) + 0.5
        check_grad(lambda x: ad.tsum(ad.log(x), 0), data)

    def test_relu_gradient_away_from_kink(self):
        data = rand((8,), 12)
        data = np.where(np.abs(data) < 1e-3, 0.5, data)  # kink exclusion
        check_grad(lambda x: ad.tsum(ad.mul(ad.relu(x), ad.relu(x)), 0), data)

    def test_matmul_gradient(self):
        a_data = rand((3, 4), 13)
        b = ad.Tensor(rand((4, 2), 14), dtype=np.float64)
        check_grad(lambda x: ad.tsum(ad.tsum(ad.mul(ad.matmul(x, b), ad.matmul(x, b)), 1), 0), a_data)

    def test_affine_gradients_all_operands(self):
        x_data = rand((2, 3, 4), 25)
        w = ad.Tensor(rand((4, 5), 26), dtype=np.float64)
        b = ad.Tensor(rand((5,), 27), dtype=np.float64)

        def loss_of(t, wt, bt):
            out = ad.affine(t, wt, bt)
            return ad.tsum(ad.tsum(ad.tsum(ad.mul(out, out), 2), 1), 0)

        check_grad(lambda t: loss_of(t, w, b), x_data)
        x = ad.Tensor(x_data, dtype=np.float64)
        check_grad(lambda wt: loss_of(x, wt, b), w.data)
        check_grad(lambda bt: loss_of(x, w, bt), b.data)

    def test_affine_matches_matmul_add(self):
        x = ad.Tensor(rand((3, 4), 28), dtype=np.float64)
        w = ad.Tensor(rand((4, 2), 29), dtype=np.float64)
        b = ad.Tensor(rand((2,), 30), dtype=np.float64)
        np.testing.assert_array_equal(ad.affine(x, w, b).data,
                                      ad.add(ad.matmul(x, w), b).data)

    def test_stacked_matmul_gradient(self):
        a_data = rand((2, 3, 3), 15)
        b = ad.Tensor(rand((2, 3, 3), 16), dtype=np.float64)
        check_grad(lambda x: ad.tsum(ad.tsum(ad.tsum(ad.mul(ad.matmul(x, b), ad.matmul(x, b)), 2), 1), 0),
                   a_data)

    def test_layernorm_gradient(self):
        data = rand((4, 6), 17)
        scale = ad.Tensor(rand((6,), 18) * 0.1 + 1.0, dtype=np.float64)
        shift = ad.Tensor(rand((6,), 19) * 0.1, dtype=np.float64)
        check_grad(lambda x: ad.tsum(ad.tsum(ad.pow_scalar(ad.layernorm(x, scale, shift), 2.0), 1), 0),
                   data)

    def test_layernorm_scale_shift_gradient(self):
        x = ad.Tensor(rand((4, 6), 20), dtype=np.float64)

        def build(s):
            shift = ad.Tensor(np.zeros(6), dtype=np.float64)
            return ad.tsum(ad.tsum(ad.pow_scalar(ad.layernorm(x, s, shift), 2.0), 1), 0)

        check_grad(build, np.ones(6) + rand((6,), 21) * 0.1)

    def test_expand_gradient(self):
        data = rand((3, 1), 22)
        check_grad(lambda x: ad.tsum(ad.tsum(ad.pow_scalar(ad.expand(x, (3, 5)), 2.0), 1), 0), data)

    def test_concat_gradient(self):
        data = rand((2, 3), 23)
        other = ad.Tensor(rand((2, 3), 24), dtype=np.float64)
        check_grad(lambda x: ad.tsum(ad.tsum(ad.pow_scalar(ad.concat((x, other), 0), 2.0), 1), 0), data)
