import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mimscape import tensor as T
from mimscape.params import ParameterSet
from mimscape.tensor import ContractError, DimensionError, Tape

from conftest import central_difference, max_relative_error


def triple_loop(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for q in range(k):
                out[i, j] += a[i, q] * b[q, j]
    return out


def test_matmul_identity_and_zero():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(np.eye(2), x).data, x)
    assert np.array_equal(T.matmul(np.eye(2), np.zeros((2, 2))).data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(T.matmul(a, b).data, triple_loop(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(np.zeros(3)).data, [1 / 3] * 3, atol=1e-15)
    for c in (-5.0, 0.0, 7.25):
        np.testing.assert_allclose(T.softmax(np.array([c, c + math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-12)
    out = T.softmax(np.array([1000.0, 1001.0])).data
    assert np.all(np.isfinite(out))
    e = math.e
    np.testing.assert_allclose(out, [1 / (1 + e), e / (1 + e)], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_softmax_sums_to_one_and_is_shift_invariant(seed, shift):
    x = np.random.default_rng(seed).normal(size=(3, 5)) * 4
    y = T.softmax(x, axis=-1).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(x + shift, axis=-1).data, y, atol=1e-12)


def test_softmax_axis_out_of_range():
    with pytest.raises(DimensionError):
        T.softmax(np.zeros((2, 2)), axis=2)


def test_layer_norm_statistics(rng):
    x = rng.normal(3.0, 5.0, size=(4, 6, 10))
    y = T.layer_norm(x, np.ones(10), np.zeros(10), eps=0.0).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-10
    assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-8


def test_backward_of_sum_is_ones(rng):
    p = ParameterSet(w=rng.normal(size=(3, 4)))
    with Tape() as tape:
        leaves = tape.watch(p)
        loss = T.sum(leaves["w"])
    np.testing.assert_array_equal(tape.backward(loss)["w"], np.ones((3, 4)))


def test_backward_of_half_square_norm_is_identity(rng):
    p = ParameterSet(w=rng.normal(size=(5,)))
    with Tape() as tape:
        leaves = tape.watch(p)
        loss = T.scale(T.sum(T.square(leaves["w"])), 0.5)
    np.testing.assert_allclose(tape.backward(loss)["w"], p["w"], atol=1e-15)


def test_backward_unused_leaf_gets_zero_and_nonscalar_root_rejected(rng):
    p = ParameterSet(a=rng.normal(size=3), b=rng.normal(size=2))
    with Tape() as tape:
        leaves = tape.watch(p)
        loss = T.sum(leaves["a"])
        vec = T.scale(leaves["a"], 2.0)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads["b"], np.zeros(2))
    with pytest.raises(ContractError):
        tape.backward(vec)


def test_no_tape_means_plain_values(rng):
    out = T.gelu(T.Tensor(rng.normal(size=4), requires_grad=True))
    assert out._node is None


def test_tensor_does_not_freeze_caller_array():
    a = np.zeros(3)
    T.Tensor(a)
    a[0] = 1.0  # still writeable
    assert a[0] == 1.0


def _op_cases():
    r = np.random.default_rng(7)
    a34, b34 = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    b4 = r.normal(size=4)
    bm = r.normal(size=(2, 4, 3))
    w, bias = r.normal(size=(5, 4)), r.normal(size=5)
    idx = np.array([[2, 0], [1, 1]])
    x3 = r.normal(size=(2, 3, 4))
    return {
        "add_broadcast": ({"a": a34, "b": b4}, lambda p: T.add(p["a"], p["b"])),
        "sub": ({"a": a34, "b": b34}, lambda p: T.sub(p["a"], p["b"])),
        "mul": ({"a": a34, "b": b34}, lambda p: T.mul(p["a"], p["b"])),
        "square": ({"a": a34}, lambda p: T.square(p["a"])),
        "gelu": ({"a": a34 * 2}, lambda p: T.gelu(p["a"])),
        "matmul": ({"a": r.normal(size=(2, 3, 4)), "b": bm}, lambda p: T.matmul(p["a"], p["b"])),
        "linear": ({"x": x3, "w": w, "b": bias}, lambda p: T.linear(p["x"], p["w"], p["b"])),
        "softmax": ({"a": a34}, lambda p: T.softmax(p["a"], axis=-1)),
        "log_softmax": ({"a": a34}, lambda p: T.log_softmax(p["a"], axis=0)),
        "layer_norm": ({"x": x3, "g": r.normal(size=4), "b": r.normal(size=4)},
                       lambda p: T.layer_norm(p["x"], p["g"], p["b"])),
        "mean_axis": ({"a": x3}, lambda p: T.mean(p["a"], axis=1)),
        "sum_keepdims": ({"a": x3}, lambda p: T.sum(p["a"], axis=2, keepdims=True)),
        "reshape_transpose": ({"a": x3}, lambda p: T.transpose(T.reshape(p["a"], (3, 2, 4)), (2, 0, 1))),
        "take_rows": ({"a": x3[:, :, :2]}, lambda p: T.take_rows(p["a"], idx)),
        "concat": ({"a": a34, "b": b34}, lambda p: T.concat([p["a"], p["b"]], axis=0)),
        "expand": ({"a": b4}, lambda p: T.expand(p["a"], (2, 3, 4))),
        "getitem_fancy": ({"a": a34}, lambda p: T.getitem(p["a"], np.array([0, 2, 2]))),
        "getitem_basic": ({"a": x3}, lambda p: T.getitem(p["a"], 1)),
    }


@pytest.mark.parametrize("name", list(_op_cases()))
def test_op_gradient_matches_finite_differences(name):
    params, op = _op_cases()[name]
    params = ParameterSet((k, np.asarray(v, dtype=np.float64)) for k, v in params.items())
    out_shape = op(params).shape
    weights = np.random.default_rng(3).normal(size=out_shape)

    def scalar(p):
        return float(np.sum(op(p).data * weights))

    with Tape() as tape:
        leaves = tape.watch(params)
        loss = T.sum(T.mul(op(leaves), weights))
    analytic = tape.backward(loss)
    numeric = central_difference(scalar, params, h=1e-5)
    assert max_relative_error(analytic, numeric) < 1e-4
