import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import adamw_ref, conv1d_ref, layernorm_ref, linear_ref
from unimd.numcore import (
    AdamW,
    Graph,
    GraphError,
    NonDeterministicError,
    NonFiniteError,
    OptimState,
    ShapeError,
    Tensor,
    adamw_step,
    backward,
    cosine_lr,
    grad_check,
    no_grad,
    ops,
    parameter,
)


def P(a):
    return parameter(np.asarray(a, dtype=float))


# -- conv1d -------------------------------------------------------------------


def test_conv1d_identity_kernel():
    x = Tensor(np.array([[1.0], [2.0], [3.0]]))
    w = Tensor(np.ones((1, 1, 1)))
    np.testing.assert_array_equal(ops.conv1d(x, w).data.ravel(), [1, 2, 3])


def test_conv1d_box_sum_zero_pad():
    x = Tensor(np.array([[1.0], [2.0], [3.0]]))
    w = Tensor(np.ones((3, 1, 1)))
    np.testing.assert_array_equal(ops.conv1d(x, w, pad=1).data.ravel(), [3, 6, 5])


def test_conv1d_matches_nested_loops(rng):
    x = rng.normal(size=(7, 2))
    w = rng.normal(size=(3, 2, 3))
    b = rng.normal(size=3)
    out = ops.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=1, pad=1).data
    np.testing.assert_allclose(out, conv1d_ref(x, w, b, 1, 1), rtol=0, atol=1e-12)


@given(T=st.integers(1, 12), cin_g=st.integers(1, 3), cout_g=st.integers(1, 3), groups=st.integers(1, 3),
       K=st.integers(1, 5), stride=st.integers(1, 3), pad=st.integers(0, 3), seed=st.integers(0, 2**16))
def test_conv1d_property_vs_reference(T, cin_g, cout_g, groups, K, stride, pad, seed):
    if (T + 2 * pad - K) // stride + 1 < 1:
        return
    r = np.random.default_rng(seed)
    x = r.normal(size=(T, cin_g * groups))
    w = r.normal(size=(K, cin_g, cout_g * groups))
    out = ops.conv1d(Tensor(x), Tensor(w), None, stride=stride, pad=pad, groups=groups).data
    np.testing.assert_allclose(out, conv1d_ref(x, w, None, stride, pad, groups), rtol=0, atol=1e-12)


def test_conv1d_errors():
    x = Tensor(np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        ops.conv1d(x, Tensor(np.zeros((3, 3, 2))))
    with pytest.raises(ShapeError):
        ops.conv1d(x, Tensor(np.zeros((5, 4, 2))))  # output length < 1
    with pytest.raises(ShapeError):
        ops.conv1d(x, Tensor(np.zeros((1, 2, 3))), groups=2)  # C_out not divisible


# -- elementwise --------------------------------------------------------------


def test_elementwise_examples():
    assert ops.elementwise("sigmoid", Tensor(np.array(0.0))).item() == 0.5
    assert ops.elementwise("relu", Tensor(np.array(-2.5))).item() == 0.0
    assert ops.elementwise("relu", Tensor(np.array(3.0))).item() == 3.0


def test_scale_value_and_gradient():
    x = P([1.0, 2.0])
    s = P([3.0])
    y = ops.elementwise("scale", x, s)
    np.testing.assert_array_equal(y.data, [3, 6])
    backward(ops.sum(y))
    np.testing.assert_array_equal(s.grad, [3.0])  # sum of x
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_elementwise_errors():
    with pytest.raises(ValueError):
        ops.elementwise("tanh", Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        ops.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))  # only scalar broadcasting


def test_scalar_broadcast_gradient():
    x = P(np.ones((2, 3)))
    s = P([2.0])
    backward(ops.sum(ops.mul(x, s)))
    np.testing.assert_array_equal(s.grad, [6.0])


# -- linear / layernorm -------------------------------------------------------


def test_linear_examples():
    eye = Tensor(np.eye(2))
    np.testing.assert_array_equal(ops.linear(Tensor(np.array([1.0, 0.0])), eye).data, [1, 0])
    out = ops.linear(Tensor(np.array([1.0, 1.0])), Tensor(np.array([[2.0], [3.0]])), Tensor(np.array([1.0])))
    np.testing.assert_array_equal(out.data, [6.0])


def test_linear_matches_nested_loops(rng):
    x, w, b = rng.normal(size=(4, 8)), rng.normal(size=(8, 5)), rng.normal(size=5)
    np.testing.assert_allclose(ops.linear(Tensor(x), Tensor(w), Tensor(b)).data, linear_ref(x, w, b), rtol=0, atol=1e-12)


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        ops.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_layernorm_examples():
    out = ops.layernorm(Tensor(np.array([[5.0, 5.0, 5.0]])), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, [[0, 0, 0]])
    out = ops.layernorm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_array_equal(out.data, [[1, -1]])


def test_layernorm_matches_reference(rng):
    x, g, b = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4)
    out = ops.layernorm(Tensor(x), Tensor(g), Tensor(b)).data
    np.testing.assert_allclose(out, layernorm_ref(x, g, b), rtol=0, atol=1e-10)


def test_layernorm_zero_channels():
    with pytest.raises(ShapeError):
        ops.layernorm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


# -- autodiff -----------------------------------------------------------------


def test_backward_sum():
    x = P([1.0, 2.0, 3.0])
    backward(ops.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_square():
    x = P([2.0, -3.0])
    backward(ops.sum(ops.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [4, -6])


def test_backward_twice_doubles_gradients(rng):
    x = P(rng.normal(size=(4, 3)))
    w = P(rng.normal(size=(3, 2)))
    loss = ops.sum(ops.sigmoid(ops.linear(x, w)))
    g = Graph(loss)
    g.backward(loss)
    first_x, first_w = x.grad.copy(), w.grad.copy()
    g.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * first_x)
    np.testing.assert_array_equal(w.grad, 2 * first_w)


def test_backward_needs_scalar():
    x = P([1.0, 2.0])
    with pytest.raises(GraphError):
        backward(ops.mul(x, 2.0))


def test_graph_detects_cycles():
    a = P([1.0])
    b = ops.mul(a, 2.0)
    c = ops.mul(b, 3.0)
    b._parents = (c,)  # corrupt the tape on purpose
    with pytest.raises(GraphError):
        Graph(ops.sum(c))


def test_graph_visits_each_node_once(rng):
    x = P(rng.normal(size=3))
    y = ops.mul(x, x)  # x used twice by one op
    z = ops.add(y, y)  # y used twice
    loss = ops.sum(z)
    g = Graph(loss)
    assert len({id(n) for n in g.nodes}) == len(g.nodes)
    backward(loss, g)
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_no_grad_records_nothing():
    x = P([1.0])
    with no_grad():
        y = ops.mul(x, 2.0)
    assert not y.requires_grad and y.is_leaf()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        ops.log(Tensor(np.array([0.0])))
    with pytest.raises(NonFiniteError):
        ops.div(Tensor(np.array([1.0])), Tensor(np.array([0.0])))


def test_kernels_are_deterministic(rng):
    x, w = rng.normal(size=(9, 4)), rng.normal(size=(3, 4, 5))
    a = ops.conv1d(Tensor(x), Tensor(w), pad=1).data
    b = ops.conv1d(Tensor(x), Tensor(w), pad=1).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("fn", [
    lambda x: ops.max_pool1d(x, 3, 2, 1),
    lambda x: ops.upsample_nearest(ops.max_pool1d(x, 3, 2, 1), x.shape[0]),
    lambda x: ops.l2_normalize(x),
    lambda x: ops.gelu(x),
    lambda x: ops.concat([x, ops.transpose(ops.transpose(x))], axis=0),
    lambda x: ops.index(x, (slice(1, 4), slice(None))),
])
def test_shape_ops_gradcheck(fn, rng):
    x = P(rng.normal(size=(7, 3)))
    w = rng.normal(size=fn(x).shape)
    err = grad_check(lambda: ops.sum(ops.mul(fn(x), w)), [x], probe_count=10, h=1e-6)
    assert err < 1e-6


# -- grad_check ---------------------------------------------------------------


def test_grad_check_sigmoid_sum(rng):
    x = P(rng.normal(size=6))
    assert grad_check(lambda: ops.sum(ops.sigmoid(x)), [x], probe_count=6, h=1e-5) < 1e-6


def test_grad_check_conv_chain(rng):
    x = P(rng.normal(size=(10, 3)))
    w1, w2 = P(rng.normal(size=(3, 3, 4))), P(rng.normal(size=(3, 4, 2)))

    def fn():
        h = ops.gelu(ops.conv1d(x, w1, pad=1))
        return ops.sum(ops.sigmoid(ops.conv1d(h, w2, stride=2, pad=1)))

    assert grad_check(fn, [x, w1, w2], probe_count=5) < 1e-4


def test_grad_check_constant_is_zero():
    x = P([1.0, 2.0])
    assert grad_check(lambda: ops.sum(ops.mul(x, 0.0)), [x]) == 0.0


def test_grad_check_flags_nondeterminism():
    x = P([1.0])
    r = np.random.default_rng(0)
    with pytest.raises(NonDeterministicError):
        grad_check(lambda: ops.sum(ops.mul(x, float(r.normal()))), [x])


def test_grad_check_catches_a_wrong_backward(rng):
    x = P(rng.normal(size=5))

    def fn():
        y = ops.sigmoid(x)
        bw = y._backward
        y._backward = lambda g: tuple(v * 1.1 for v in bw(g))
        return ops.sum(y)

    assert grad_check(fn, [x], probe_count=5) > 1e-3


# -- optimizer ----------------------------------------------------------------


def test_adamw_zero_grad_no_decay_is_noop():
    p = np.array([1.0, -2.0])
    adamw_step([p], [np.zeros(2)], OptimState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adamw_first_step_hand_value():
    p = np.array([1.0])
    state = OptimState(lr=0.1, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8)
    adamw_step([p], [np.array([1.0])], state)
    assert p[0] == pytest.approx(0.9, abs=1e-7)
    assert state.step == 1


def test_adamw_pure_decay():
    p = np.array([2.0])
    adamw_step([p], [np.zeros(1)], OptimState(lr=0.1, weight_decay=0.01))
    assert p[0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), abs=1e-15)


def test_adamw_matches_scalar_recurrence(rng):
    p = rng.normal(size=4)
    ref = [(float(v), 0.0, 0.0) for v in p]
    state = OptimState(lr=0.01, weight_decay=0.05)
    for step in range(1, 6):
        g = rng.normal(size=4)
        adamw_step([p], [g], state)
        ref = [adamw_ref(pv, float(gv), m, v, step, 0.01, 0.9, 0.999, 1e-8, 0.05) for (pv, m, v), gv in zip(ref, g)]
    np.testing.assert_allclose(p, [r[0] for r in ref], rtol=1e-13)


def test_adamw_errors():
    with pytest.raises(ValueError):
        adamw_step([np.zeros(2)], [np.zeros(3)], OptimState())
    with pytest.raises(FloatingPointError):
        adamw_step([np.zeros(1)], [np.array([np.nan])], OptimState())


def test_adamw_wrapper_respects_no_decay():
    a, b = P([1.0]), P([1.0])
    opt = AdamW([a, b], lr=0.1, weight_decay=0.5, no_decay={id(b)})
    a.grad = np.zeros(1)
    b.grad = np.zeros(1)
    opt.step()
    assert a.data[0] == pytest.approx(0.95) and b.data[0] == 1.0


def test_cosine_schedule():
    assert cosine_lr(0, 100, 1.0) == 1.0
    assert cosine_lr(50, 100, 1.0) == pytest.approx(0.5)
    assert cosine_lr(100, 100, 1.0, min_ratio=0.1) == pytest.approx(0.1)
    assert cosine_lr(0, 100, 1.0, warmup=10) == pytest.approx(0.1)
    assert math.isclose(cosine_lr(10, 100, 1.0, warmup=10), 1.0)
