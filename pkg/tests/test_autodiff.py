import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relnet.autodiff import (NonFiniteValue, ShapeError, Tape, Tensor, UnknownPrimitive,
                             grad_check)


def t(x, trainable=False):
    return Tensor(np.asarray(x, dtype=np.float64), trainable=trainable)


# --- forward values -------------------------------------------------------

def test_sigmoid_of_zero_is_half():
    assert Tape().sigmoid(t([0.0])).value[0] == 0.5


def test_prelu_with_unit_slope_is_identity():
    x = np.array([-3.0, -0.5, 0.0, 2.0])
    out = Tape().prelu(t(x), t([1.0]))
    np.testing.assert_array_equal(out.value, x)


def test_softmax_of_constant_is_uniform():
    out = Tape().softmax(t([4.2, 4.2, 4.2]))
    np.testing.assert_allclose(out.value, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_l2_normalize_tiny_vector_divides_by_eps():
    out = Tape().l2_normalize(t([1e-12, 0.0]), eps=1e-8)
    np.testing.assert_allclose(out.value, [1e-4, 0.0])


def test_gather_and_concat():
    tape = Tape()
    table = t([[0.0, 0.0], [1.0, 2.0], [3.0, 4.0]])
    rows = tape.gather(table, np.array([[2, 1]]))
    assert rows.shape == (1, 2, 2)
    cat = tape.concat([t([1.0]), t([2.0, 3.0])])
    np.testing.assert_array_equal(cat.value, [1.0, 2.0, 3.0])


def test_matvec_applies_to_last_axis():
    W = np.arange(6.0).reshape(2, 3)
    x = np.arange(12.0).reshape(2, 2, 3)
    out = Tape().matvec(t(W), t(x))
    np.testing.assert_allclose(out.value, np.einsum("ij,abj->abi", W, x))


def test_cross_entropy_uniform():
    out = Tape().cross_entropy(t([[0.0, 0.0, 0.0, 0.0]]), np.array([2]))
    assert out.value[0] == pytest.approx(math.log(4), abs=1e-15)


# --- errors ---------------------------------------------------------------

@pytest.mark.parametrize("op, args", [
    ("add", ([1.0, 2.0], [1.0, 2.0, 3.0])),
    ("mul", ([[1.0, 2.0]], [1.0, 2.0, 3.0])),
    ("matvec", ([[1.0, 2.0]], [1.0, 2.0, 3.0])),
    ("inner", ([1.0, 2.0], [1.0, 2.0, 3.0])),
])
def test_shape_mismatch_names_primitive(op, args):
    with pytest.raises(ShapeError, match=op):
        Tape().apply(op, *(t(a) for a in args))


def test_gather_out_of_range():
    with pytest.raises(ShapeError, match="gather"):
        Tape().gather(t(np.zeros((3, 2))), np.array([3]))


def test_unknown_primitive():
    with pytest.raises(UnknownPrimitive):
        Tape().apply("tanh", t([1.0]))


def test_backward_rejects_non_scalar_loss():
    tape = Tape()
    x = t([1.0, 2.0], trainable=True)
    y = tape.mul(x, x)
    with pytest.raises(ShapeError, match="scalar"):
        tape.backward(y)


# --- backward values ------------------------------------------------------

def test_product_rule():
    tape = Tape()
    x, y = t([3.0], True), t([5.0], True)
    g = tape.backward(tape.sum(tape.mul(x, y)))
    assert g[x][0] == 5.0
    assert g[y][0] == 3.0


def test_sigmoid_slope_at_zero():
    tape = Tape()
    x = t([0.0], True)
    g = tape.backward(tape.sum(tape.sigmoid(x)))
    assert g[x][0] == 0.25


def test_unreachable_leaf_gets_zero_gradient():
    tape = Tape()
    x, unused = t([2.0], True), t([[1.0, 2.0]], True)
    g = tape.backward(tape.sum(tape.mul(x, x)), [x, unused])
    assert g[x][0] == 4.0
    np.testing.assert_array_equal(g[unused], np.zeros((1, 2)))


def test_shared_embedding_rows_accumulate():
    tape = Tape()
    table = t(np.ones((3, 2)), True)
    rows = tape.gather(table, np.array([1, 1, 2]))
    g = tape.backward(tape.sum(rows))
    np.testing.assert_array_equal(g[table], [[0, 0], [2, 2], [1, 1]])


# --- grad_check -----------------------------------------------------------

def test_grad_check_quadratic():
    err = grad_check(lambda tape, p: tape.sum(tape.mul(p["x"], p["x"])), {"x": np.array([2.0])}, h=1e-5)
    assert err <= 1e-9


def test_grad_check_constant_function():
    err = grad_check(lambda tape, p: tape.sum(tape.scale(p["x"], 0.0)), {"x": np.array([1.0, -1.0])})
    assert err == 0.0


def test_grad_check_rejects_nonfinite():
    with pytest.raises(NonFiniteValue):
        grad_check(lambda tape, p: tape.sum(tape.scale(p["x"], np.inf)), {"x": np.array([1.0])})


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda tape, p: tape.sum(p["x"]), {"x": np.array([1.0])}, h=0.0)


# --- every primitive against central differences -------------------------

def _weights(rng, shape):
    return Tensor(rng.normal(size=shape))


def _case(name, rng):
    """Parameters and a scalar function exercising primitive ``name``."""
    n = int(rng.integers(1, 4))
    k = int(rng.integers(1, 5))
    if name in ("add", "sub", "mul"):
        p = {"a": rng.normal(size=(n, k)), "b": rng.normal(size=(k,))}
        w = _weights(rng, (n, k))
        return p, lambda tape, v: tape.sum(tape.mul(tape.apply(name, v["a"], v["b"]), w))
    if name == "matvec":
        m = int(rng.integers(1, 5))
        p = {"W": rng.normal(size=(m, k)), "x": rng.normal(size=(n, 2, k))}
        w = _weights(rng, (n, 2, m))
        return p, lambda tape, v: tape.sum(tape.mul(tape.matvec(v["W"], v["x"]), w))
    if name == "inner":
        p = {"a": rng.normal(size=(n, 1, k)), "b": rng.normal(size=(3, k))}
        w = _weights(rng, (n, 3))
        return p, lambda tape, v: tape.sum(tape.mul(tape.inner(v["a"], v["b"]), w))
    if name in ("sigmoid", "softmax"):
        p = {"x": rng.normal(size=(n, k)) * 2}
        w = _weights(rng, (n, k))
        return p, lambda tape, v: tape.sum(tape.mul(tape.apply(name, v["x"]), w))
    if name == "prelu":
        x = rng.normal(size=(n, k))
        x[np.abs(x) < 1e-3] = 0.5
        p = {"x": x, "a": rng.uniform(-1, 2, size=(1,))}
        w = _weights(rng, (n, k))
        return p, lambda tape, v: tape.sum(tape.mul(tape.prelu(v["x"], v["a"]), w))
    if name == "l2_normalize":
        p = {"x": rng.normal(size=(n, k)) + 0.1}
        w = _weights(rng, (n, k))
        return p, lambda tape, v: tape.sum(tape.mul(tape.l2_normalize(v["x"]), w))
    if name == "concat":
        p = {"a": rng.normal(size=(n, k)), "b": rng.normal(size=(n, 2))}
        w = _weights(rng, (n, k + 2))
        return p, lambda tape, v: tape.sum(tape.mul(tape.concat([v["a"], v["b"]]), w))
    if name == "sum":
        p = {"x": rng.normal(size=(n, k, 2))}
        w = _weights(rng, (n, 2))
        return p, lambda tape, v: tape.sum(tape.mul(tape.sum(v["x"], axis=1), w))
    if name == "gather":
        p = {"E": rng.normal(size=(5, k))}
        ids = rng.integers(0, 5, size=(n, 3))
        w = _weights(rng, (n, 3, k))
        return p, lambda tape, v: tape.sum(tape.mul(tape.gather(v["E"], ids), w))
    if name == "scale":
        p = {"x": rng.normal(size=(n, k))}
        c = float(rng.normal())
        w = _weights(rng, (n, k))
        return p, lambda tape, v: tape.sum(tape.mul(tape.scale(v["x"], c), w))
    if name == "reshape":
        p = {"x": rng.normal(size=(n, k))}
        w = _weights(rng, (k, n))
        return p, lambda tape, v: tape.sum(tape.mul(tape.reshape(v["x"], (k, n)), w))
    if name == "broadcast_to":
        p = {"x": rng.normal(size=(1, k))}
        w = _weights(rng, (n, 3, k))
        return p, lambda tape, v: tape.sum(tape.mul(tape.broadcast_to(v["x"], (n, 3, k)), w))
    if name == "cross_entropy":
        p = {"x": rng.normal(size=(n, k + 1))}
        labels = rng.integers(0, k + 1, size=n)
        return p, lambda tape, v: tape.sum(tape.cross_entropy(v["x"], labels))
    raise KeyError(name)


PRIMS = ["add", "sub", "mul", "matvec", "inner", "sigmoid", "prelu", "softmax", "l2_normalize",
         "concat", "sum", "gather", "scale", "reshape", "broadcast_to", "cross_entropy"]


@pytest.mark.parametrize("name", PRIMS)
@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_primitive_gradients_match_finite_differences(name, seed):
    params, f = _case(name, np.random.default_rng(seed))
    assert grad_check(f, params, h=1e-5, samples=50, seed=seed) <= 1e-4


# --- properties -----------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_a_distribution(xs):
    p = Tape().softmax(t(xs)).value
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_l2_normalize_gives_unit_norm(xs):
    x = np.asarray(xs)
    if np.linalg.norm(x) <= 1e-8:
        return
    y = Tape().l2_normalize(t(x)).value
    assert abs(np.linalg.norm(y) - 1.0) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_replay_is_bit_identical(seed):
    rng = np.random.default_rng(seed)
    tape = Tape()
    W = t(rng.normal(size=(3, 4)), True)
    x = t(rng.normal(size=(2, 4)))
    h = tape.prelu(tape.matvec(W, x), t([0.3], True))
    out = tape.sum(tape.mul(tape.softmax(h), tape.sigmoid(h)))
    tape.backward(out)
    assert tape.replay_matches()
