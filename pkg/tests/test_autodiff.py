"""Unit and property tests for the tape-based autodiff core."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundsel import autodiff as ad


def t64(data):
    return ad.Tensor(data, dtype=np.float64)


def grad_of(build, leaves):
    with ad.record() as rec:
        loss = build()
    rec.backward(loss)
    return [leaf.grad for leaf in leaves]


class TestForwardOracles:
    def test_matmul_hand_values(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        b = t64([[5.0, 6.0], [7.0, 8.0]])
        out = ad.matmul(a, b)
        assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_softmax_hand_values(self):
        x = t64([[0.0, np.log(2.0)]])
        out = ad.softmax_rows(x)
        assert np.allclose(out.data, [[1.0 / 3.0, 2.0 / 3.0]], atol=1e-12)

    def test_softmax_masked_column_is_exactly_zero(self):
        x = t64([[0.0, ad.MASK_VALUE, 1.0]])
        out = ad.softmax_rows(x)
        assert out.data[0, 1] == 0.0
        assert np.isclose(out.data.sum(), 1.0)

    def test_layernorm_hand_values(self):
        x = t64([[1.0, -1.0]])
        gamma = t64([[1.0, 1.0]])
        beta = t64([[0.0, 0.0]])
        out = ad.layernorm_rows(x, gamma, beta, eps=1e-12)
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-9)

    def test_gelu_fixed_point_and_sign(self):
        x = t64([[0.0, 100.0, -100.0]])
        out = ad.gelu(x)
        assert out.data[0, 0] == 0.0
        assert np.isclose(out.data[0, 1], 100.0)
        assert np.isclose(out.data[0, 2], 0.0, atol=1e-12)

    def test_sigmoid_stable_at_extremes(self):
        x = t64([[-500.0, 0.0, 500.0]])
        out = ad.sigmoid(x)
        assert np.allclose(out.data, [[0.0, 0.5, 1.0]], atol=1e-12)

    def test_affine_matches_matmul_plus_bias(self):
        x = t64([[1.0, 2.0], [3.0, 4.0]])
        w = t64([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0]])
        b = t64([[10.0, 20.0, 30.0]])
        out = ad.affine(x, w, b)
        assert np.array_equal(out.data, x.data @ w.data + b.data)


class TestBackwardOracles:
    def test_sum_of_squares_gradient(self):
        x = t64([[1.0, 2.0]])
        (g,) = grad_of(lambda: ad.sum_all(ad.mul(x, x)), [x])
        assert np.array_equal(g, [[2.0, 4.0]])

    def test_matmul_gradient_hand_derived(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        b = t64([[5.0, 6.0], [7.0, 8.0]])
        ga, gb = grad_of(lambda: ad.sum_all(ad.matmul(a, b)), [a, b])
        assert np.array_equal(ga, np.ones((2, 2)) @ b.data.T)
        assert np.array_equal(gb, a.data.T @ np.ones((2, 2)))

    def test_div_gradient(self):
        a = t64([[6.0]])
        b = t64([[3.0]])
        ga, gb = grad_of(lambda: ad.sum_all(ad.div(a, b)), [a, b])
        assert np.isclose(ga[0, 0], 1.0 / 3.0)
        assert np.isclose(gb[0, 0], -6.0 / 9.0)

    def test_min_max_ties_route_to_first_argument(self):
        a = t64([[2.0]])
        b = t64([[2.0]])
        ga, gb = grad_of(lambda: ad.sum_all(ad.minimum(a, b)), [a, b])
        assert ga[0, 0] == 1.0 and gb[0, 0] == 0.0
        ga, gb = grad_of(lambda: ad.sum_all(ad.maximum(a, b)), [a, b])
        assert ga[0, 0] == 1.0 and gb[0, 0] == 0.0

    def test_relu_zero_input_gets_zero_gradient(self):
        x = t64([[0.0, -1.0, 3.0]])
        (g,) = grad_of(lambda: ad.sum_all(ad.relu(x)), [x])
        assert np.array_equal(g, [[0.0, 0.0, 1.0]])

    def test_gather_repeated_rows_accumulate(self):
        x = t64([[1.0, 1.0], [2.0, 2.0]])
        (g,) = grad_of(lambda: ad.sum_all(ad.gather_rows(x, [0, 0, 1])), [x])
        assert np.array_equal(g, [[2.0, 2.0], [1.0, 1.0]])

    def test_concat_slice_roundtrip_gradient(self):
        a = t64([[1.0, 2.0]])
        b = t64([[3.0, 4.0], [5.0, 6.0]])

        def build():
            cat = ad.concat_rows([a, b])
            return ad.sum_all(ad.slice_rows(cat, 1, 3))

        ga, gb = grad_of(build, [a, b])
        assert np.array_equal(ga, [[0.0, 0.0]])
        assert np.array_equal(gb, [[1.0, 1.0], [1.0, 1.0]])

    def test_shared_input_accumulates_both_paths(self):
        x = t64([[3.0]])
        (g,) = grad_of(lambda: ad.sum_all(ad.add(ad.mul(x, x), x)), [x])
        assert g[0, 0] == 7.0

    def test_unreachable_leaf_has_none_gradient(self):
        x = t64([[1.0]])
        y = t64([[2.0]])
        with ad.record() as rec:
            used = ad.scale(x, 2.0)
            ad.scale(y, 3.0)  # on the record but not feeding the loss
            loss = ad.sum_all(used)
        rec.backward(loss)
        assert x.grad is not None
        assert y.grad is None

    def test_backward_rejects_non_scalar(self):
        x = t64([[1.0, 2.0]])
        with ad.record() as rec:
            out = ad.mul(x, x)
        with pytest.raises(ad.ContractViolation):
            rec.backward(out)

    def test_backward_is_deterministic(self):
        rng = np.random.default_rng(7)
        x = t64(rng.normal(size=(4, 4)))
        w = t64(rng.normal(size=(4, 4)))

        def run():
            with ad.record() as rec:
                loss = ad.sum_all(ad.gelu(ad.matmul(x, w)))
            rec.backward(loss)
            return x.grad.copy(), w.grad.copy()

        gx1, gw1 = run()
        gx2, gw2 = run()
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)


class TestGuards:
    def test_shape_mismatch_raises(self):
        with pytest.raises(ad.ShapeMismatch):
            ad.add(t64([[1.0]]), t64([[1.0, 2.0]]))

    def test_mixed_dtype_raises(self):
        a = ad.Tensor([[1.0]], dtype=np.float32)
        b = ad.Tensor([[1.0]], dtype=np.float64)
        with pytest.raises(ad.ContractViolation):
            ad.add(a, b)

    def test_division_by_zero_raises_nonfinite(self):
        with pytest.raises(ad.NonFiniteValue):
            ad.div(t64([[1.0]]), t64([[0.0]]))

    def test_overflow_raises_nonfinite(self):
        big = ad.Tensor([[3.0e38]], dtype=np.float32)
        with pytest.raises(ad.NonFiniteValue):
            ad.mul(big, big)

    def test_tensor_rejects_nan(self):
        with pytest.raises(ad.NonFiniteValue):
            ad.Tensor([[np.nan]])

    def test_gather_out_of_range(self):
        with pytest.raises(ad.ContractViolation):
            ad.gather_rows(t64([[1.0]]), [1])


@settings(max_examples=50, deadline=None)
@given(
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=0, max_value=2**32 - 1),
)
def test_softmax_rows_sum_to_one(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(scale=3.0, size=(rows, cols)))
    out = ad.softmax_rows(x)
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-12)
    assert (out.data >= 0).all()


@settings(max_examples=50, deadline=None)
@given(
    st.integers(min_value=2, max_value=8),
    st.integers(min_value=0, max_value=2**32 - 1),
)
def test_layernorm_standardises_rows(cols, seed):
    rng = np.random.default_rng(seed)
    x = t64(rng.normal(size=(3, cols)) * 2.0 + 1.0)
    gamma = t64(np.ones((1, cols)))
    beta = t64(np.zeros((1, cols)))
    out = ad.layernorm_rows(x, gamma, beta, eps=1e-12)
    assert np.allclose(out.data.mean(axis=1), 0.0, atol=1e-9)
    assert np.allclose(out.data.var(axis=1), 1.0, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_finite_differences_on_composite(seed):
    rng = np.random.default_rng(seed)
    params = {
        "w1": t64(rng.normal(scale=0.5, size=(3, 4))),
        "b1": t64(rng.normal(scale=0.1, size=(1, 4))),
        "w2": t64(rng.normal(scale=0.5, size=(4, 2))),
        "b2": t64(rng.normal(scale=0.1, size=(1, 2))),
    }
    x = t64(rng.normal(size=(2, 3)))

    def f(p):
        h = ad.gelu(ad.affine(x, p["w1"], p["b1"]))
        out = ad.sigmoid(ad.affine(h, p["w2"], p["b2"]))
        return ad.mean_all(ad.mul(out, out))

    # The 1e-5 denominator floor absorbs difference-quotient roundoff on
    # near-zero gradients; a wrong derivative shows errors of order 1.
    worst, _ = ad.finite_diff_check(f, params, h=1e-5)
    assert worst < 1e-6


def test_finite_differences_through_softmax_and_layernorm():
    rng = np.random.default_rng(0)
    params = {
        "x": t64(rng.normal(size=(3, 5))),
        "gamma": t64(rng.normal(size=(1, 5)) * 0.2 + 1.0),
        "beta": t64(rng.normal(size=(1, 5)) * 0.2),
    }

    def f(p):
        normed = ad.layernorm_rows(p["x"], p["gamma"], p["beta"])
        soft = ad.softmax_rows(normed)
        return ad.sum_all(ad.mul(soft, soft))

    worst, _ = ad.finite_diff_check(f, params, h=1e-5)
    assert worst < 1e-6


def test_finite_differences_catch_a_wrong_backward():
    # a primitive that lies about its derivative (claims 3, truth is 2)
    def doubled_with_bad_grad(x):
        out = ad.Tensor(x.data * 2.0)
        ad._emit(out, [x], lambda g: [3.0 * g])
        return out

    params = {"x": t64([[0.5, -1.0], [2.0, 0.25]])}

    def f(p):
        return ad.sum_all(doubled_with_bad_grad(p["x"]))

    worst, per_param = ad.finite_diff_check(f, params, h=1e-5)
    assert worst > 0.1
    assert per_param["x"] == worst


def test_reduction_shapes_are_one_by_one():
    x = t64([[1.0, 2.0], [3.0, 4.0]])
    assert ad.sum_all(x).shape == (1, 1)
    assert ad.mean_all(x).shape == (1, 1)
    assert ad.sum_rows(x).shape == (2, 1)
    assert ad.mean_rows(x).shape == (2, 1)
    assert ad.sum_all(x).item() == 10.0
    assert ad.mean_rows(x).data[1, 0] == 3.5
