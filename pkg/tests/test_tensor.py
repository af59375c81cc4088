import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msanet import tensor as T
from msanet.tensor import ContractError, ShapeError, Tensor


def leaf(shape, seed=0, lo=-1.0, hi=1.0):
    return T.tensor_new(shape, "uniform", seed=seed, low=lo, high=hi, requires_grad=True)


class TestTensorNew:
    def test_constant_fill(self):
        t = T.tensor_new((2, 3, 4, 5), 1.5)
        assert t.shape == (2, 3, 4, 5)
        assert t.data.dtype == np.float32
        assert np.all(t.data == 1.5)

    def test_uniform_is_seeded_and_bounded(self):
        a = T.tensor_new((1, 2, 8, 8), "uniform", seed=3, low=-2, high=2)
        b = T.tensor_new((1, 2, 8, 8), "uniform", seed=3, low=-2, high=2)
        np.testing.assert_array_equal(a.data, b.data)
        assert a.data.min() >= -2 and a.data.max() <= 2

    def test_explicit_values_row_major(self):
        t = T.tensor_new((1, 1, 2, 3), list(range(6)))
        np.testing.assert_array_equal(t.data[0, 0], [[0, 1, 2], [3, 4, 5]])

    def test_value_count_mismatch(self):
        with pytest.raises(ShapeError):
            T.tensor_new((1, 1, 2, 2), [1.0, 2.0, 3.0])

    def test_negative_extent(self):
        with pytest.raises(ShapeError):
            T.tensor_new((1, -1, 2, 2))

    def test_unknown_fill(self):
        with pytest.raises(ValueError):
            T.tensor_new((1, 1, 1, 1), "normal")

    def test_constructor_casts_to_float32(self):
        assert Tensor(np.zeros(3, dtype=np.float64)).data.dtype == np.float32


class TestElementwise:
    def test_add_sub_mul_values(self):
        a, b = leaf((1, 2, 3, 3), 1), leaf((1, 2, 3, 3), 2)
        np.testing.assert_allclose(T.add(a, b).data, a.data + b.data)
        np.testing.assert_allclose(T.sub(a, b).data, a.data - b.data)
        np.testing.assert_allclose(T.mul(a, b).data, a.data * b.data)
        np.testing.assert_allclose(T.scale(a, -3.0).data, -3.0 * a.data)

    def test_operator_sugar(self):
        a, b = leaf((1, 1, 2, 2), 1), leaf((1, 1, 2, 2), 2)
        np.testing.assert_allclose((a + b - a * b).data, a.data + b.data - a.data * b.data)
        np.testing.assert_allclose((-a).data, -a.data)

    def test_channel_and_position_broadcast(self):
        a = leaf((2, 3, 4, 4))
        c = leaf((2, 3, 1, 1), 1)
        p = leaf((2, 1, 4, 4), 2)
        np.testing.assert_allclose(T.mul(a, c).data, a.data * c.data)
        np.testing.assert_allclose(T.mul(a, p).data, a.data * p.data)

    @pytest.mark.parametrize("shape", [(1, 3, 4, 1), (2, 3, 1, 1), (1, 2, 4, 4), (3,)])
    def test_other_broadcasts_rejected(self, shape):
        with pytest.raises(ShapeError):
            T.add(leaf((1, 3, 4, 4)), Tensor(np.ones(shape)))

    def test_dispatch_by_name(self):
        a, b = leaf((1, 1, 2, 2), 1), leaf((1, 1, 2, 2), 2)
        np.testing.assert_allclose(T.elementwise(a, b, "sub").data, a.data - b.data)
        np.testing.assert_allclose(T.elementwise(a, 2.0, "scale").data, 2 * a.data)
        with pytest.raises(ValueError):
            T.elementwise(a, b, "div")

    def test_broadcast_gradient_reduces(self):
        a = leaf((2, 3, 4, 4))
        c = leaf((2, 3, 1, 1), 1)
        T.backward(T.sum_all(T.mul(a, c)))
        np.testing.assert_allclose(c.grad, a.data.sum(axis=(2, 3), keepdims=True), rtol=1e-5)
        np.testing.assert_allclose(a.grad, np.broadcast_to(c.data, a.shape), rtol=1e-6)


class TestStructural:
    def test_concat_and_slice_roundtrip(self):
        a, b = leaf((1, 2, 3, 3), 1), leaf((1, 3, 3, 3), 2)
        cat = T.concat_channels([a, b])
        assert cat.shape == (1, 5, 3, 3)
        np.testing.assert_array_equal(T.channel_slice(cat, 2, 5).data, b.data)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat_channels([leaf((1, 2, 3, 3)), leaf((1, 2, 4, 3))])

    def test_slice_bounds(self):
        with pytest.raises(ShapeError):
            T.channel_slice(leaf((1, 2, 3, 3)), 1, 3)

    def test_sum_and_mean(self):
        a = leaf((2, 3, 4, 5))
        assert T.sum_all(a).shape == (1, 1, 1, 1)
        np.testing.assert_allclose(T.sum_all(a).item(), a.data.sum(dtype=np.float64), rtol=1e-6)
        np.testing.assert_allclose(T.mean_all(a).item(), a.data.mean(dtype=np.float64), rtol=1e-6)


class TestBackward:
    def test_requires_scalar(self):
        with pytest.raises(ContractError):
            T.backward(T.add(leaf((1, 1, 2, 2)), leaf((1, 1, 2, 2), 1)))

    def test_requires_grad_tracking(self):
        with pytest.raises(ContractError):
            T.backward(T.sum_all(Tensor(np.ones((1, 1, 2, 2)))))

    def test_diamond_accumulates(self):
        # f = sum(a*a + a) ; df/da = 2a + 1, with a reached along two paths
        a = leaf((1, 2, 3, 3))
        T.backward(T.sum_all(T.add(T.mul(a, a), a)))
        np.testing.assert_allclose(a.grad, 2 * a.data + 1, rtol=1e-6)

    def test_leaf_grad_accumulates_across_calls(self):
        a = leaf((1, 1, 2, 2))
        T.backward(T.sum_all(T.scale(a, 2.0)))
        T.backward(T.sum_all(T.scale(a, 3.0)))
        np.testing.assert_allclose(a.grad, np.full(a.shape, 5.0))

    def test_tape_is_consumed(self):
        a = leaf((1, 1, 2, 2))
        loss = T.sum_all(T.mul(a, a))
        T.backward(loss)
        assert loss.is_leaf

    def test_method_form(self):
        a = leaf((1, 1, 2, 2))
        T.sum_all(T.scale(a, 4.0)).backward()
        np.testing.assert_allclose(a.grad, 4.0)

    def test_no_grad_records_nothing(self):
        a = leaf((1, 1, 2, 2))
        with T.no_grad():
            assert not T.is_grad_enabled()
            out = T.mul(a, a)
        assert T.is_grad_enabled()
        assert out.is_leaf and not out.requires_grad

    def test_detach_cuts_graph(self):
        a = leaf((1, 1, 2, 2))
        b = T.mul(a, a).detach()
        assert b.is_leaf and not b.requires_grad

    def test_deep_chain_no_recursion_limit(self):
        a = leaf((1, 1, 1, 1))
        x = a
        for _ in range(5000):
            x = T.scale(x, 1.0)
        T.backward(T.sum_all(x))
        np.testing.assert_allclose(a.grad, 1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_product_rule(self, u, v):
        a = T.tensor_new((1, 1, 1, 1), [u], requires_grad=True)
        b = T.tensor_new((1, 1, 1, 1), [v], requires_grad=True)
        T.backward(T.sum_all(T.mul(a, b)))
        np.testing.assert_allclose(a.grad.item(), np.float32(v))
        np.testing.assert_allclose(b.grad.item(), np.float32(u))


class TestDebugGuard:
    def test_non_finite_detected_in_debug(self):
        T.set_debug(True)
        try:
            a = Tensor(np.array([[[[np.inf]]]], dtype=np.float32), requires_grad=True)
            with pytest.raises(FloatingPointError):
                T.scale(a, 1.0)
        finally:
            T.set_debug(False)

    def test_silent_when_off(self):
        T.set_debug(False)
        a = Tensor(np.array([[[[np.inf]]]], dtype=np.float32))
        assert np.isinf(T.scale(a, 1.0).item())
