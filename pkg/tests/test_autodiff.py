import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from argmtl import autodiff as ad
from argmtl.autodiff import Graph, backward, check_gradients, forward


def test_square_forward_and_grad():
    g = Graph()
    x = g.parameter([[3.0]])
    root = g.hadamard(x, x)
    assert forward(g, root) == 9.0
    backward(g, root)
    assert x.grad[0, 0] == 6.0


def test_sigmoid_zero_matrix():
    g = Graph()
    s = g.sigmoid(g.input(np.zeros((2, 2))))
    np.testing.assert_array_equal(ad.evaluate(g, s), np.full((2, 2), 0.5))


def test_logsumexp_uniform_row():
    g = Graph()
    r = g.logsumexp_rows(g.input([[0.0, 0.0, 0.0, 0.0]]))
    assert forward(g, r) == pytest.approx(math.log(4), abs=1e-12)
    assert forward(g, r) == pytest.approx(1.386294, abs=1e-6)


def test_logsumexp_large_values_stay_finite():
    g = Graph()
    r = g.logsumexp_rows(g.input([[1000.0, 1000.0]]))
    assert forward(g, r) == pytest.approx(1000.0 + math.log(2))


def test_sum_sigmoid_grad_at_zero():
    g = Graph()
    x = g.parameter([[0.0]])
    root = g.sum(g.sigmoid(x))
    forward(g, root)
    backward(g, root)
    assert x.grad[0, 0] == pytest.approx(0.25, abs=1e-15)


def test_matvec_grad_matches_frozen_fd():
    # central differences at step 1e-5 give [[1, 2], [1, 2]]
    g = Graph()
    W = g.parameter(np.zeros((2, 2)))
    v = g.input([[1.0], [2.0]])
    root = g.sum(g.matmul(W, v))
    forward(g, root)
    backward(g, root)
    np.testing.assert_allclose(W.grad, [[1.0, 2.0], [1.0, 2.0]], atol=1e-12)

    def builder(g, p):
        return g.sum(g.matmul(p[0], g.input([[1.0], [2.0]])))

    num = ad.numeric_gradients(builder, [np.zeros((2, 2))], step=1e-5)[0]
    np.testing.assert_allclose(num, [[1.0, 2.0], [1.0, 2.0]], atol=1e-9)


def test_unreachable_parameter_gets_zero_grad():
    g = Graph()
    x = g.parameter([[2.0]])
    unused = g.parameter(np.ones((3, 2)))
    root = g.hadamard(x, x)
    forward(g, root)
    backward(g, root)
    np.testing.assert_array_equal(unused.grad, np.zeros((3, 2)))


def test_backward_before_forward_raises():
    g = Graph()
    x = g.parameter([[1.0]])
    root = g.sum(x)
    with pytest.raises(ad.BackwardBeforeForwardError):
        backward(g, root)


def test_shape_mismatch_raises():
    g = Graph()
    root = g.sum(g.matmul(g.input(np.ones((2, 3))), g.input(np.ones((2, 3)))))
    with pytest.raises(ad.ShapeMismatchError):
        forward(g, root)


def test_non_scalar_root_rejected():
    g = Graph()
    root = g.tanh(g.input(np.ones((2, 2))))
    with pytest.raises(ad.ShapeMismatchError):
        forward(g, root)


def test_overflow_is_reported():
    g = Graph()
    big = g.input([[1e200]])
    root = g.hadamard(big, big)
    with pytest.raises(ad.NonFiniteError):
        forward(g, root)


def test_each_node_evaluated_once():
    g = Graph()
    x = g.parameter([[0.3, -0.2]])
    h = g.tanh(x)
    # h feeds three consumers; it must still be computed once
    root = g.sum(g.add(g.hadamard(h, h), h))
    forward(g, root)
    n_ops = sum(1 for n in g.nodes if n.inputs)
    assert g.evaluations == n_ops


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))

    def run():
        g = Graph()
        r = g.sum(g.tanh(g.matmul(g.parameter(a), g.parameter(b))))
        return forward(g, r)

    assert run() == run()


def test_quadratic_gradient_check_is_tight():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))

    def builder(g, p):
        x = p[0]
        return g.sum(g.hadamard(g.matmul(g.input(A), x), x))

    assert check_gradients(builder, [rng.normal(size=(3, 2))], step=1e-5) < 1e-7


def test_checker_detects_corrupted_backward(monkeypatch):
    # loss = 0.5 * sum(x * x), gradient x; doubling one upstream entry doubles one
    # gradient entry, a relative error of |x0| / max(1, 2|x0|) = 0.5 for |x0| >= 0.5
    x = np.array([[1.5, -0.5], [0.7, 2.0]])

    def builder(g, p):
        return g.sum(g.scale(g.hadamard(p[0], p[0]), 0.5))

    assert check_gradients(builder, [x.copy()]) < 1e-8

    original = ad.BACKWARD["scale"]

    def corrupted(node, g, a):
        (da,) = original(node, g, a)
        da = da.copy()
        da.flat[0] *= 2.0
        return (da,)

    monkeypatch.setitem(ad.BACKWARD, "scale", corrupted)
    err = check_gradients(builder, [x.copy()])
    assert err > 0.3
    assert err == pytest.approx(0.5, abs=1e-6)


# per-op gradient properties -------------------------------------------------

OPS = {
    "matmul": (2, lambda g, p: g.sum(g.matmul(p[0], p[1])), lambda r, c, rng: [
        rng.normal(size=(r, c)), rng.normal(size=(c, r))]),
    "add": (2, lambda g, p: g.sum(g.tanh(g.add(p[0], p[1]))), lambda r, c, rng: [
        rng.normal(size=(r, c)), rng.normal(size=(r, c))]),
    "add_broadcast": (2, lambda g, p: g.sum(g.tanh(g.add(p[0], p[1]))), lambda r, c, rng: [
        rng.normal(size=(r, c)), rng.normal(size=(1, c))]),
    "hadamard": (2, lambda g, p: g.sum(g.hadamard(p[0], p[1])), lambda r, c, rng: [
        rng.normal(size=(r, c)), rng.normal(size=(r, c))]),
    "sigmoid": (1, lambda g, p: g.sum(g.sigmoid(p[0])), lambda r, c, rng: [
        rng.normal(size=(r, c))]),
    "tanh": (1, lambda g, p: g.sum(g.tanh(p[0])), lambda r, c, rng: [rng.normal(size=(r, c))]),
    "concat_cols": (2, lambda g, p: g.sum(g.tanh(g.concat_cols([p[0], p[1], p[0]]))),
                    lambda r, c, rng: [rng.normal(size=(r, c)), rng.normal(size=(r, 2))]),
    "concat_rows": (2, lambda g, p: g.sum(g.tanh(g.concat_rows([p[0], p[1]]))),
                    lambda r, c, rng: [rng.normal(size=(r, c)), rng.normal(size=(1, c))]),
    "row_select": (1, lambda g, p: g.sum(g.tanh(g.row_select(p[0], [0, 0, p[0].value.shape[0] - 1]))),
                   lambda r, c, rng: [rng.normal(size=(r, c))]),
    "col_slice": (1, lambda g, p: g.sum(g.tanh(g.col_slice(p[0], 0, max(1, p[0].value.shape[1] // 2)))),
                  lambda r, c, rng: [rng.normal(size=(r, c))]),
    "transpose": (2, lambda g, p: g.sum(g.matmul(g.transpose(p[0]), p[1])),
                  lambda r, c, rng: [rng.normal(size=(r, c)), rng.normal(size=(r, 2))]),
    "logsumexp_row": (1, lambda g, p: g.sum(g.tanh(g.logsumexp_rows(p[0]))),
                      lambda r, c, rng: [3 * rng.normal(size=(r, c))]),
    "scale": (1, lambda g, p: g.sum(g.tanh(g.scale(p[0], -1.7))),
              lambda r, c, rng: [rng.normal(size=(r, c))]),
    "mask": (1, lambda g, p: g.sum(g.tanh(g.mask(p[0], np.arange(p[0].value.size).reshape(p[0].value.shape) % 3))),
             lambda r, c, rng: [rng.normal(size=(r, c))]),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_primitive_gradients_match_central_differences(op):
    _, builder, make = OPS[op]
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    for _ in range(100):
        r, c = rng.integers(1, 5, size=2)
        params = make(int(r), int(c), rng)
        assert check_gradients(builder, params, step=1e-5) < 1e-4


@settings(max_examples=30, deadline=None)
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 2**31 - 1))
def test_composite_gradient_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    params = [rng.normal(size=(rows, cols)), rng.normal(size=(cols, 3)), rng.normal(size=(1, 3))]

    def builder(g, p):
        h = g.tanh(g.add(g.matmul(p[0], p[1]), p[2]))
        return g.sum(g.logsumexp_rows(g.hadamard(h, g.sigmoid(h))))

    assert check_gradients(builder, params) < 1e-4
