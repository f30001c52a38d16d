import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from semcom.tensor import (GELU_COEFF, GraphConsumedError, NonFiniteError, Tape, Tensor, add, attention,
                           backward, gelu, layer_norm, linear, matmul, mse, no_grad, roll, softmax, sum_all,
                           window_merge, window_partition)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def arrays(shape):
    return hnp.arrays(np.float64, shape, elements=finite)


# --- matmul ----------------------------------------------------------------

def test_matmul_identity():
    out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    assert out.data.tolist() == [[3, 4], [5, 6]]


def test_matmul_row_by_column():
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, oracles.matmul(a.tolist(), b.tolist()),
                               rtol=0, atol=1e-12)


def test_matmul_inner_mismatch():
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.data())
def test_matmul_shape_property(m, k, n, data):
    a = data.draw(arrays((m, k)))
    b = data.draw(arrays((k, n)))
    assert matmul(Tensor(a), Tensor(b)).shape == (m, n)


# --- layer norm --------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((1, 5), 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.all(out.data == 0.0)


def test_layer_norm_already_normalised():
    out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-15)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-12)


def test_layer_norm_moments(rng):
    x = rng.standard_normal((1, 17)) * 3 + 2
    out = layer_norm(Tensor(x), Tensor(np.ones(17)), Tensor(np.zeros(17))).data[0]
    assert abs(out.mean()) <= 1e-12
    assert abs(out.var() - 1.0) <= 1e-6


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


# --- softmax -----------------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_array_equal(softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


@given(finite)
def test_softmax_shift_invariant_constant(c):
    np.testing.assert_allclose(softmax(Tensor([[c, c, c]])).data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_matches_exp_sum(rng):
    x = rng.standard_normal((1, 9)) * 4
    out = softmax(Tensor(x)).data[0]
    assert abs(out.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(out, oracles.softmax_row(x[0].tolist()), rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays((3, 6)))
def test_softmax_rows_sum_to_one(x):
    out = softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


def test_softmax_large_inputs_stay_finite():
    out = softmax(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))


# --- gelu --------------------------------------------------------------------

def test_gelu_zero():
    assert gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_asymptote():
    assert abs(gelu(Tensor([10.0])).data[0] - 10.0) <= 1e-6


def test_gelu_at_one_matches_formula():
    from decimal import Decimal, getcontext
    getcontext().prec = 40
    x = Decimal(1)
    inner = Decimal(2 / math.pi).sqrt() * (x + Decimal(GELU_COEFF) * x ** 3)
    # tanh(z) = (e^{2z} - 1) / (e^{2z} + 1)
    e2 = (2 * inner).exp()
    ref = Decimal("0.5") * x * (1 + (e2 - 1) / (e2 + 1))
    assert abs(gelu(Tensor([1.0])).data[0] - float(ref)) <= 1e-15


# --- attention ---------------------------------------------------------------

def test_attention_single_token_returns_v(rng):
    q, k, v = (Tensor(rng.standard_normal((1, 4))) for _ in range(3))
    np.testing.assert_allclose(attention(q, k, v, 2).data, v.data, atol=1e-15)


def test_attention_zero_query_averages_v(rng):
    v = rng.standard_normal((5, 4))
    out = attention(Tensor(np.zeros((5, 4))), Tensor(rng.standard_normal((5, 4))), Tensor(v), 2).data
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (5, 1)), atol=1e-12)


def test_attention_matches_per_head_loop(rng):
    q, k, v = (rng.standard_normal((3, 4)) for _ in range(3))
    out = attention(Tensor(q), Tensor(k), Tensor(v), 2).data
    np.testing.assert_allclose(out, oracles.attention(q.tolist(), k.tolist(), v.tolist(), 2),
                               rtol=0, atol=1e-12)


def test_attention_heads_must_divide_width():
    z = Tensor(np.ones((2, 3)))
    with pytest.raises(ValueError):
        attention(z, z, z, 2)


# --- window partition ----------------------------------------------------------

def test_single_window_is_row_major(rng):
    x = rng.standard_normal((2, 2, 3))
    out = window_partition(Tensor(x), 2).data
    assert out.shape == (1, 4, 3)
    np.testing.assert_array_equal(out[0], x.reshape(4, 3))


def test_window_index_arithmetic():
    x = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
    out = window_partition(Tensor(x), 2).data
    assert out.shape == (4, 4, 1)
    # token (0, 3): window row 0, window col 1 -> window 1; local (0, 1) -> position 1
    assert out[1, 1, 0] == x[0, 3, 0]
    for r in range(4):
        for c in range(4):
            wi, pos = (r // 2) * 2 + c // 2, (r % 2) * 2 + c % 2
            assert out[wi, pos, 0] == x[r, c, 0]


def test_window_round_trip_bit_identical(rng):
    x = rng.standard_normal((8, 8, 3))
    back = window_merge(window_partition(Tensor(x), 2), 2, 8, 8).data
    assert np.array_equal(back, x)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4))
def test_window_round_trip_property(win, nh, nw, d):
    x = np.random.default_rng(nh * 7 + nw).standard_normal((2, nh * win, nw * win, d))
    assert np.array_equal(window_merge(window_partition(Tensor(x), win), win, nh * win, nw * win).data, x)


# --- mse -----------------------------------------------------------------------

def test_mse_identical_is_zero(rng):
    a = rng.standard_normal((3, 3))
    assert mse(Tensor(a), Tensor(a.copy())).item() == 0.0


def test_mse_unit():
    assert mse(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 1.0


def test_mse_matches_loop(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    assert abs(mse(Tensor(a), Tensor(b)).item() - oracles.mse(a.tolist(), b.tolist())) <= 1e-12


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        mse(Tensor(np.ones(3)), Tensor(np.ones(4)))


# --- graph / backward --------------------------------------------------------------

def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    backward(mse(x, Tensor(0.0)))
    assert x.grad == pytest.approx(6.0)


def test_backward_sum_of_matmul(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    backward(sum_all(matmul(a, b)))
    for row in a.grad:
        np.testing.assert_allclose(row, b.data.sum(axis=1), atol=1e-12)
    for col in b.grad.T:
        np.testing.assert_allclose(col, a.data.sum(axis=0), atol=1e-12)


def test_second_backward_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = sum_all(gelu(x))
    backward(loss)
    with pytest.raises(GraphConsumedError):
        backward(loss)


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(gelu(x))


def test_gradient_accumulates_over_fan_out():
    x = Tensor(2.0, requires_grad=True)
    backward(sum_all(add(x, x)))
    assert x.grad == 2.0


def test_tape_is_topological(rng):
    a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    loss = sum_all(gelu(matmul(a, a)))
    tape = Tape.record(loss)
    seen = set()
    for node in tape.nodes:
        for p in node._parents:
            if p._parents:
                assert id(p) in seen
        seen.add(id(node))


def test_grad_shape_matches_value(rng):
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    backward(sum_all(linear(Tensor(rng.standard_normal((5, 3))), w, b)))
    assert w.grad.shape == w.shape and b.grad.shape == b.shape


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        add(Tensor([1e308]), Tensor([1e308]))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = gelu(x)
    assert not y.requires_grad


def test_roll_backward_inverts(rng):
    x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    g = rng.standard_normal((4, 4))
    backward(sum_all(roll(x, (1, -1), (0, 1)) * Tensor(g)))
    np.testing.assert_array_equal(x.grad, np.roll(g, (-1, 1), (0, 1)))
