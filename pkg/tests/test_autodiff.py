import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from treecalc.autodiff import (NonFiniteError, ShapeError, Tape, Tensor, grad_check,
                               numeric_gradient, relative_error)


def param(values):
    return Tensor(values, requires_grad=True)


def test_sum_of_products_gradient():
    # sum(a * b + a), a=[1,2], b=[3,4] -> d/da = b + 1, d/db = a
    a, b = param([1.0, 2.0]), param([3.0, 4.0])
    tape = Tape()
    out = tape.sum(tape.add(tape.hadamard(a, b), a))
    assert out.item() == pytest.approx(14.0)
    tape.backward(out)
    np.testing.assert_array_equal(a.grad, [4.0, 5.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0])


def test_tanh_at_zero_has_unit_slope():
    x = param([0.0])
    tape = Tape()
    y = tape.tanh(x)
    tape.backward(y)
    assert y.item() == 0.0
    assert x.grad[0] == pytest.approx(1.0)


def test_sigmoid_at_zero():
    x = param([0.0])
    tape = Tape()
    y = tape.sigmoid(x)
    tape.backward(y)
    assert y.item() == 0.5
    assert x.grad[0] == pytest.approx(0.25)


def test_shape_mismatch_raises():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.add(param([1.0, 2.0]), param([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError):
        tape.matvec(param(np.ones((2, 3))), param([1.0, 2.0]))


def test_scalar_operand_broadcasts():
    a, s = param([1.0, 2.0, 3.0]), param([2.0])
    tape = Tape()
    out = tape.sum(tape.hadamard(a, s))
    tape.backward(out)
    assert out.item() == 12.0
    np.testing.assert_array_equal(a.grad, [2.0, 2.0, 2.0])
    assert s.grad[0] == 6.0


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_rejected():
    tape = Tape()
    big = param([1e308])
    with pytest.raises(NonFiniteError):
        tape.hadamard(big, big)


def test_gradients_accumulate_across_tapes():
    w = param([2.0])
    for _ in range(3):
        tape = Tape()
        out = tape.hadamard(w, w)
        tape.backward(out)
    assert w.grad[0] == pytest.approx(12.0)
    w.zero_grad()
    assert w.grad[0] == 0.0


def test_shared_input_sums_paths():
    x = param([3.0])
    tape = Tape()
    y = tape.add(tape.hadamard(x, x), tape.scale(x, 5.0))
    tape.backward(y)
    assert x.grad[0] == pytest.approx(2 * 3.0 + 5.0)


def test_disabled_tape_records_nothing():
    tape = Tape(enabled=False)
    out = tape.tanh(param([0.3]))
    assert len(tape) == 0
    assert not out.requires_grad


def test_backward_needs_scalar():
    tape = Tape()
    out = tape.tanh(param([0.1, 0.2]))
    with pytest.raises(ShapeError):
        tape.backward(out)


def test_softmax_sums_to_one_and_grad_is_zero_for_constant_upstream():
    v = param([0.3, -1.0, 2.0])
    tape = Tape()
    s = tape.softmax(v)
    assert s.data.sum() == pytest.approx(1.0, abs=1e-12)
    tape.backward(tape.sum(s))
    np.testing.assert_allclose(v.grad, 0.0, atol=1e-15)


def test_bce_values():
    tape = Tape()
    p = param([0.8])
    assert tape.binary_cross_entropy(p, 1.0).item() == pytest.approx(-np.log(0.8))
    assert tape.binary_cross_entropy(p, 0.0).item() == pytest.approx(-np.log(0.2))
    # clamped away from log(0)
    assert np.isfinite(tape.binary_cross_entropy(Tensor([0.0]), 1.0).item())


def test_dropout_mask_is_reused_in_backward():
    rng = np.random.default_rng(0)
    a = param(np.ones(200))
    tape = Tape()
    out = tape.dropout(a, 0.5, rng)
    tape.backward(tape.sum(out))
    np.testing.assert_array_equal(a.grad, out.data)
    assert set(np.unique(out.data)) <= {0.0, 2.0}


def test_numeric_gradient_of_square():
    x = param([1.5, -2.0])
    g = numeric_gradient(lambda: float((x.data ** 2).sum()), x)
    np.testing.assert_allclose(g, [3.0, -4.0], rtol=1e-8)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1.0]), np.array([-1.0]))[0] == 1.0


OPS = {
    "tanh": lambda t, a, b, W: t.sum(t.tanh(a)),
    "sigmoid": lambda t, a, b, W: t.sum(t.sigmoid(a)),
    "hadamard": lambda t, a, b, W: t.sum(t.hadamard(a, b)),
    "sub": lambda t, a, b, W: t.dot(t.sub(a, b), t.tanh(a)),
    "matvec": lambda t, a, b, W: t.dot(t.matvec(W, a), b),
    "linear": lambda t, a, b, W: t.sum(t.tanh(t.linear([(W, a), (W, b)], [a]))),
    "softmax": lambda t, a, b, W: t.dot(t.softmax(a), b),
    "concat_pick": lambda t, a, b, W: t.pick(t.tanh(t.concat([a, b])), 4),
    "sum_of_products": lambda t, a, b, W: t.sum(t.sum_of_products([(a, b), (b, b)])),
    "add_n": lambda t, a, b, W: t.sum(t.tanh(t.add_n([a, b, a]))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(1)
    a, b = param(rng.normal(size=3)), param(rng.normal(size=3))
    W = param(rng.normal(size=(3, 3)))
    err = grad_check(lambda t: OPS[name](t, a, b, W), [a, b, W])
    assert err <= 1e-6


def test_bilinear_contract_gradient():
    rng = np.random.default_rng(2)
    W = param(rng.normal(size=(3, 3, 4)))
    z, x = param(rng.normal(size=3)), param(rng.normal(size=4))
    err = grad_check(lambda t: t.sum(t.tanh(t.bilinear_contract(W, z, x))), [W, z, x])
    assert err <= 1e-6


def test_bilinear_contract_value():
    # out_i = sum_jk W_ijk z_j x_k
    W = Tensor(np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3))
    z, x = Tensor([1.0, -1.0]), Tensor([1.0, 0.0, 2.0])
    out = Tape().bilinear_contract(W, z, x)
    np.testing.assert_allclose(out.data, np.einsum("ijk,j,k->i", W.data, z.data, x.data))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-3, 3)),
       arrays(np.float64, 4, elements=st.floats(-3, 3)))
def test_dot_gradient_property(u, v):
    a, b = param(u), param(v)
    tape = Tape()
    tape.backward(tape.dot(a, b))
    np.testing.assert_allclose(a.grad, v)
    np.testing.assert_allclose(b.grad, u)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-20, 20)))
def test_softmax_is_a_distribution(v):
    s = Tape().softmax(Tensor(v))
    assert s.data.sum() == pytest.approx(1.0, abs=1e-12)
    assert (s.data >= 0).all()
