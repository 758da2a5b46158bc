import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vitastar import numcore as nc
from vitastar.numcore import Tensor

from conftest import central_diff


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def grad_of(fn, x):
    t = leaf(x)
    nc.backward(fn(t))
    return t.grad


# matmul ---------------------------------------------------------------------

def test_matmul_identity():
    out = nc.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_times_column():
    assert nc.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(nc.DimensionError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences(rng):
    a0, b = rng.normal(size=(3, 3)), Tensor(rng.normal(size=(3, 3)))
    g = grad_of(lambda a: nc.sum_(nc.matmul(a, b)), a0)
    oracle = central_diff(lambda a: float(np.sum(a @ b.data)), a0)
    np.testing.assert_allclose(g, oracle, rtol=1e-6)


def test_batched_matmul_gradient(rng):
    a0, b0 = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))
    w = rng.normal(size=(2, 3, 2))
    ga = grad_of(lambda a: nc.sum_(nc.mul(nc.matmul(a, Tensor(b0)), Tensor(w))), a0)
    np.testing.assert_allclose(ga, central_diff(lambda a: float(np.sum((a @ b0) * w)), a0), rtol=1e-6)


# elementwise ------------------------------------------------------------------

def test_mul():
    assert nc.elementwise("mul", Tensor([[1, 2]]), Tensor([[3, 4]])).data.tolist() == [[3, 8]]


def test_exp_at_zero():
    assert nc.elementwise("exp", Tensor([[0.0]])).data.tolist() == [[1.0]]
    g = grad_of(lambda x: nc.sum_(nc.exp(x)), [[0.0]])
    assert abs(g[0, 0] - 1.0) < 1e-9


def test_elementwise_shape_mismatch():
    with pytest.raises(nc.DimensionError):
        nc.elementwise("add", Tensor(np.ones((2, 2))), Tensor(np.ones((1, 2))))


def test_scalar_divide():
    out = nc.elementwise("div", Tensor([[2.0, 4.0]]), 2.0)
    assert out.data.tolist() == [[1.0, 2.0]]
    with pytest.raises(ZeroDivisionError):
        nc.div_scalar(Tensor([1.0]), 0.0)


def test_neg_and_sub():
    a, b = Tensor([[1.0, 2.0]]), Tensor([[0.5, 0.5]])
    assert nc.elementwise("neg", a).data.tolist() == [[-1.0, -2.0]]
    assert (a - b).data.tolist() == [[0.5, 1.5]]


# finite-difference check for every registered op ------------------------------

def _ops(rng):
    w = rng.normal(size=(3, 4))
    gain, bias = rng.normal(size=4), rng.normal(size=4)
    other = rng.normal(size=(3, 4))
    right = rng.normal(size=(4, 2))
    mask = (rng.random((3, 4)) < 0.7).astype(float)
    mask[0, 0] = 1
    return {
        "add": lambda x: nc.add(x, Tensor(other)),
        "sub": lambda x: nc.sub(Tensor(other), x),
        "mul": lambda x: nc.mul(x, x),
        "neg": nc.neg,
        "exp": nc.exp,
        "scale": lambda x: nc.scale(x, -2.5),
        "div_scalar": lambda x: nc.div_scalar(x, 3.0),
        "add_scalar": lambda x: nc.add_scalar(x, 1.5),
        "abs": nc.abs_,
        "relu": nc.relu,
        "gelu": nc.gelu,
        "sigmoid": nc.sigmoid,
        "mean": nc.mean,
        "reshape": lambda x: nc.reshape(x, (4, 3)),
        "transpose": nc.transpose,
        "index": lambda x: nc.index(x, (slice(0, 2), [0, 0, 3])),
        "concat": lambda x: nc.concat([x, nc.scale(x, 2.0)], axis=1),
        "matmul": lambda x: nc.matmul(x, Tensor(right)),
        "add_bias": lambda x: nc.add_bias(x, Tensor(bias)),
        "softmax": nc.softmax,
        "layer_norm": lambda x: nc.layer_norm(x, Tensor(gain), Tensor(bias)),
        "masked_softmax": lambda x: nc.masked_softmax(x, mask, 0.7),
    }


OP_NAMES = list(_ops(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OP_NAMES)
def test_registered_op_gradients(name):
    rng = np.random.default_rng(7)
    fn = _ops(rng)[name]
    x0 = rng.normal(size=(3, 4))
    x0[np.abs(x0) < 1e-2] += 0.1  # keep relu/abs away from their kinks
    readout = rng.normal(size=fn(Tensor(x0)).shape)

    def scalar(x):
        with nc.no_grad():
            return float(np.sum(fn(Tensor(x)).data * readout))

    g = grad_of(lambda x: nc.sum_(nc.mul(fn(x), Tensor(readout))), x0)
    np.testing.assert_allclose(g, central_diff(scalar, x0), rtol=1e-4, atol=1e-8)


# masked softmax -----------------------------------------------------------------

def test_masked_softmax_symmetry():
    out = nc.masked_softmax(Tensor([[0.0, 0.0]]), np.array([[1, 1]]), 1.0)
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])


def test_masked_softmax_closed_form():
    out = nc.masked_softmax(Tensor([[0.0, math.log(3)]]), np.array([[1, 1]]), 1.0)
    np.testing.assert_allclose(out.data, [[0.75, 0.25]], rtol=1e-12)


def test_masked_softmax_single_open():
    out = nc.masked_softmax(Tensor([[1.0, 2.0]]), np.array([[1, 0]]), 1.0)
    assert out.data.tolist() == [[1.0, 0.0]]


def test_masked_softmax_empty_mask():
    with pytest.raises(nc.EmptyOpenListError):
        nc.masked_softmax(Tensor([[1.0, 2.0]]), np.zeros((1, 2)), 1.0)


def test_masked_softmax_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        nc.masked_softmax(Tensor([[1.0]]), np.ones((1, 1)), 0.0)


@settings(max_examples=200, deadline=None)
@given(scores=arrays(np.float64, (4, 5), elements=st.floats(-1e300, 1e300)),
       bits=arrays(np.bool_, (4, 5)), tau=st.floats(1e-3, 1e3))
def test_masked_softmax_sums_to_one(scores, bits, tau):
    bits.flat[0] = True
    out = nc.masked_softmax(Tensor(scores), bits.astype(float), tau).data
    assert np.all(out[~bits] == 0.0)
    assert abs(out[bits].sum() - 1.0) <= 1e-12


# backward contract ----------------------------------------------------------------

def test_backward_of_sum_is_ones():
    g = grad_of(nc.sum_, np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_sum_exp_at_zero_is_ones():
    np.testing.assert_allclose(grad_of(lambda w: nc.sum_(nc.exp(w)), np.zeros((2, 2))), np.ones((2, 2)))


def test_three_op_chain(rng):
    x0 = rng.normal(size=(3, 3))
    fn = lambda x: nc.sum_(nc.sigmoid(nc.mul(nc.exp(x), x)))  # noqa: E731
    oracle = central_diff(lambda x: float(np.sum(1 / (1 + np.exp(-np.exp(x) * x)))), x0)
    np.testing.assert_allclose(grad_of(fn, x0), oracle, rtol=1e-5)


def test_backward_rejects_non_scalar():
    with pytest.raises(nc.GraphContractError):
        nc.backward(nc.exp(leaf([1.0, 2.0])))


def test_backward_rejects_detached_loss():
    with pytest.raises(nc.GraphContractError):
        nc.backward(Tensor(1.0))


def test_repeated_backward_accumulates_until_reset():
    w = leaf([[1.0, 2.0]])
    nc.backward(nc.sum_(w))
    nc.backward(nc.sum_(w))
    np.testing.assert_array_equal(w.grad, [[2.0, 2.0]])
    nc.zero_grad([w])
    nc.backward(nc.sum_(w))
    np.testing.assert_array_equal(w.grad, [[1.0, 1.0]])


def test_shared_subexpression_matches_duplicated_oracle(rng):
    x0 = rng.normal(size=(2, 3))
    x = leaf(x0)
    shared = nc.exp(x)
    nc.backward(nc.sum_(nc.mul(shared, shared)) + nc.sum_(shared))
    # duplicated oracle: two independent copies of exp(x)
    y = leaf(x0)
    nc.backward(nc.sum_(nc.mul(nc.exp(y), nc.exp(y))) + nc.sum_(nc.exp(y)))
    np.testing.assert_allclose(x.grad, y.grad, rtol=1e-12)
    np.testing.assert_allclose(x.grad, 2 * np.exp(2 * x0) + np.exp(x0), rtol=1e-12)


def test_graph_topological_order(rng):
    x = leaf(rng.normal(size=(2, 2)))
    out = nc.sum_(nc.mul(nc.exp(x), nc.sigmoid(x)))
    graph = nc.Graph.from_output(out)
    pos = {id(n): i for i, n in enumerate(graph.nodes)}
    for node in graph.nodes:
        for parent in node.parents:
            assert pos[id(parent)] < pos[id(node)]
    assert len(set(pos)) == len(graph.nodes)
    assert graph.leaves() == [x]


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with nc.no_grad():
        y = nc.exp(x)
    assert not y.requires_grad and y.is_leaf


def test_straight_through_passes_soft_gradient():
    s = leaf([[0.0, 1.0, 2.0]])
    soft = nc.masked_softmax(s, np.ones((1, 3)), 1.0)
    hard = nc.straight_through(nc.one_hot_argmax(soft.data), soft)
    assert hard.data.tolist() == [[1.0, 0.0, 0.0]]
    r = np.array([[1.0, -2.0, 0.5]])
    nc.backward(nc.sum_(nc.mul(hard, Tensor(r))))
    p = soft.data
    np.testing.assert_allclose(s.grad, -(p * (r - (r * p).sum())), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_grad_shape_matches_data(x0):
    x = leaf(x0)
    nc.backward(nc.sum_(nc.gelu(x)))
    assert x.grad.shape == x.data.shape
    assert x.data.size == int(np.prod(x.shape))
