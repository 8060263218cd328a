import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tpt import tensor as tt
from tpt.tensor import MaskedRowError, PrecisionError, ShapeError, Tensor

from conftest import param


def numeric_grad(f, x: Tensor, h=1e-6):
    """Plain central differences over every entry, independent of the library's checker."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f().item()
        flat[i] = old - h
        down = f().item()
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def analytic_grad(f, *xs):
    tt.zero_grads(xs)
    tt.backward(f())
    return [x.grad.copy() for x in xs]


UNARY = {
    "gelu": tt.gelu,
    "relu": tt.relu,
    "tanh": tt.tanh,
    "exp": tt.exp,
    "softmax": tt.softmax_last,
    "log": lambda x: tt.log(tt.exp(x)),
    "transpose": lambda x: tt.transpose(x, (1, 0, 2)),
    "reshape": lambda x: tt.reshape(x, (6, 4)),
    "slice": lambda x: tt.slice_axis(x, 1, 3, axis=-1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_match_central_differences(name, rng):
    x = param(rng, 2, 3, 4)
    w = rng.normal(size=UNARY[name](x).shape)
    f = lambda: tt.sum(UNARY[name](x) * w)
    (a,) = analytic_grad(f, x)
    np.testing.assert_allclose(a, numeric_grad(f, x), rtol=1e-6, atol=1e-8)


def test_binary_broadcast_gradients(rng):
    a, b = param(rng, 2, 1, 4), param(rng, 3, 1)
    w = rng.normal(size=(2, 3, 4))
    for op in (tt.add, tt.sub, tt.mul):
        f = lambda: tt.sum(op(a, b) * w)
        ga, gb = analytic_grad(f, a, b)
        np.testing.assert_allclose(ga, numeric_grad(f, a), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(gb, numeric_grad(f, b), rtol=1e-6, atol=1e-8)


def test_batched_matmul_with_broadcast_leading_axes(rng):
    a, b = param(rng, 2, 1, 3, 4), param(rng, 1, 5, 4, 2)
    w = rng.normal(size=(2, 5, 3, 2))
    f = lambda: tt.sum(tt.matmul(a, b) * w)
    np.testing.assert_allclose(tt.matmul(a, b).data, a.data @ b.data)
    ga, gb = analytic_grad(f, a, b)
    np.testing.assert_allclose(ga, numeric_grad(f, a), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gb, numeric_grad(f, b), rtol=1e-6, atol=1e-8)


def test_concat_stack_split_and_reductions(rng):
    a, b = param(rng, 2, 3), param(rng, 2, 2)
    w = rng.normal(size=(2, 5))
    f = lambda: tt.sum(tt.concat([a, b], axis=-1) * w) + tt.mean(tt.stack([a, a], axis=0)) * 3.0
    ga, gb = analytic_grad(f, a, b)
    np.testing.assert_allclose(ga, numeric_grad(f, a), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gb, numeric_grad(f, b), rtol=1e-6, atol=1e-8)
    left, right = tt.split(tt.concat([a, b], axis=-1), [3, 2], axis=-1)
    assert np.array_equal(left.data, a.data) and np.array_equal(right.data, b.data)


def test_layer_norm_matches_formula_and_gradients(rng):
    x, g, b = param(rng, 3, 5), param(rng, 5), param(rng, 5)
    out = tt.layer_norm(x, g, b, eps=1e-5).data
    mu = x.data.mean(-1, keepdims=True)
    var = x.data.var(-1, keepdims=True)
    np.testing.assert_allclose(out, (x.data - mu) / np.sqrt(var + 1e-5) * g.data + b.data, rtol=1e-12)
    w = rng.normal(size=(3, 5))
    f = lambda: tt.sum(tt.layer_norm(x, g, b) * w)
    for got, t in zip(analytic_grad(f, x, g, b), (x, g, b)):
        np.testing.assert_allclose(got, numeric_grad(f, t), rtol=1e-5, atol=1e-7)


def test_gelu_is_exact_erf_form(f64):
    xs = np.linspace(-4, 4, 17)
    expected = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in xs]
    np.testing.assert_allclose(tt.gelu(Tensor(xs)).data, expected, rtol=1e-14, atol=1e-15)


def test_embedding_gather_grad_hits_only_gathered_rows(rng):
    table = param(rng, 6, 3)
    ids = np.array([[1, 4, 1]])
    tt.backward(tt.sum(tt.embedding_gather(table, ids)))
    touched = np.abs(table.grad).sum(axis=1) > 0
    assert touched.tolist() == [False, True, False, False, True, False]
    np.testing.assert_array_equal(table.grad[1], np.full(3, 2.0))
    with pytest.raises(IndexError):
        tt.embedding_gather(table, np.array([6]))


def test_take_last_and_log_floor(rng):
    p = param(rng, 2, 4)
    idx = np.array([3, 0])
    np.testing.assert_array_equal(tt.take_last(p, idx).data, p.data[[0, 1], idx])
    tiny = tt.parameter(np.array([0.0, 1.0]), dtype=np.float64)
    assert tt.log(tiny, floor=1e-12).data[0] == pytest.approx(math.log(1e-12))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions_and_shift_invariant(x):
    p = tt.softmax_last(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(tt.softmax_last(Tensor(x + 17.0)).data, p, atol=1e-12)


def test_softmax_with_masked_entries_zeroes_them():
    x = Tensor(np.array([[1.0, -np.inf, 2.0]]))
    p = tt.softmax_last(x).data
    assert p[0, 1] == 0.0
    with pytest.raises(MaskedRowError):
        tt.softmax_last(Tensor(np.array([[-np.inf, -np.inf]])))


def test_shape_errors_name_the_operation(rng):
    with pytest.raises(ShapeError, match="matmul"):
        tt.matmul(param(rng, 2, 3), param(rng, 4, 2))
    with pytest.raises(ShapeError):
        tt.add(param(rng, 2, 3), param(rng, 4, 3))


def test_no_grad_builds_no_tape(rng):
    x = param(rng, 3)
    with tt.no_grad():
        y = tt.exp(x)
    assert y.node is None and not y.requires_grad


def test_gradients_accumulate_across_backward_calls(rng):
    x = param(rng, 3)
    tt.backward(tt.sum(x * 2.0))
    tt.backward(tt.sum(x * 2.0))
    np.testing.assert_array_equal(x.grad, np.full(3, 4.0))
    tt.zero_grads([x])
    assert not x.grad.any()


def test_shared_subexpression_gradient(rng):
    x = param(rng, 4)
    y = tt.tanh(x)
    f = lambda: tt.sum(tt.tanh(x) * tt.tanh(x))
    tt.backward(tt.sum(y * y))
    np.testing.assert_allclose(x.grad, numeric_grad(f, x), rtol=1e-6)


def test_grad_check_accepts_correct_and_flags_broken_backward(rng):
    x = param(rng, 3, 2)
    assert tt.grad_check(lambda: tt.sum(tt.gelu(x) * tt.gelu(x)), [x]) < 1e-7

    def broken(t):
        def backward(g):
            return (g * 0.5,)
        return tt._result(t.data * 1.0, (t,), backward, "broken")

    assert tt.grad_check(lambda: tt.sum(broken(x) * broken(x)), [x]) > 0.1


def test_grad_check_refuses_single_precision(rng):
    x = tt.parameter(rng.normal(size=3), dtype=np.float32)
    with pytest.raises(PrecisionError):
        tt.grad_check(lambda: tt.sum(x), [x])


def test_float32_default_and_switch():
    assert tt.default_dtype() == np.float32
    assert Tensor([1.0, 2.0]).dtype == np.float32
