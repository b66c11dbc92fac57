import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cafo import tensor as T
from cafo.tensor import NonFiniteError, ShapeError, Tensor

from conftest import numeric_grad, rel_err


def check_grad(build, shapes, seed, positive=False, tol=1e-4):
    """Compare backward() with central differences for every input of build."""
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    ts = [Tensor(x, requires_grad=True) for x in xs]
    T.backward(build(*ts))
    for t, x in zip(ts, xs):
        def f():
            with T.no_grad():
                return build(*[Tensor(v) for v in xs]).item()
        num = numeric_grad(f, x)
        assert rel_err(t.grad, num) < tol


W = Tensor(np.random.default_rng(99).normal(size=(4, 3)))

OPS = {
    "add": (lambda a, b: ((a + b) * W).sum(), [(4, 3), (3,)], False),
    "sub": (lambda a, b: ((a - b) * W).sum(), [(4, 3), (4, 1)], False),
    "mul": (lambda a, b: (a * b * W).sum(), [(4, 3), (4, 3)], False),
    "div": (lambda a, b: (a / b * W).sum(), [(4, 3), (4, 3)], True),
    "matmul": (lambda a, b: ((a @ b) * W).sum(), [(4, 5), (5, 3)], False),
    "dot": (lambda a, b: T.dot(a, b) * 3.0, [(6,), (6,)], False),
    "sigmoid": (lambda a: (T.sigmoid(a) * W).sum(), [(4, 3)], False),
    "relu": (lambda a: (T.relu(a) * W).sum(), [(4, 3)], False),
    "abs": (lambda a: (T.absolute(a) * W).sum(), [(4, 3)], False),
    "exp": (lambda a: (T.exp(a) * W).sum(), [(4, 3)], False),
    "log": (lambda a: (T.log(a) * W).sum(), [(4, 3)], True),
    "sqrt": (lambda a: (T.sqrt(a) * W).sum(), [(4, 3)], True),
    "mean_axis": (lambda a: (a.mean(axis=0) * W[0]).sum(), [(4, 3)], False),
    "reshape_T": (lambda a: (a.reshape(3, 4).T * W).sum(), [(12,)], False),
    "getitem": (lambda a: (a[1:, ::2] * W[1:, ::2]).sum(), [(4, 3)], False),
    "concat": (lambda a, b: (T.concat([a, b], axis=0) * Tensor(np.ones((4, 3)))).sum() + (a * a).sum(), [(2, 3), (2, 3)], False),
    "stack": (lambda a, b: (T.stack([a, b], axis=1) * Tensor(np.arange(12.0).reshape(3, 2, 2))).sum(), [(3, 2), (3, 2)], False),
    "l2_norm": (lambda a: T.l2_norm(a) * 2.0, [(5,)], False),
    "normalize": (lambda a: (T.normalize(a) * Tensor(np.arange(5.0))).sum(), [(5,)], False),
    "softmax_ce": (lambda a: T.softmax_cross_entropy(a, np.array([0, 2, 1, 2])), [(4, 3)], False),
    "conv2d": (lambda x, w, b: (T.conv2d(x, w, b, 1, 1) * T.conv2d(x, w, b, 1, 1)).sum(), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)], False),
    "conv2d_stride2": (lambda x, w, b: T.relu(T.conv2d(x, w, b, stride=2, padding=1)).sum(), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)], False),
    "depthwise": (lambda x, w, b: (T.depthwise_conv2d(x, w, b) * T.depthwise_conv2d(x, w, b)).sum(), [(2, 3, 5, 5), (2, 3, 3, 3), (2, 3)], False),
    "depthwise_stride2": (lambda x, w, b: T.relu(T.depthwise_conv2d(x, w, b, stride=2)).sum(), [(2, 3, 5, 5), (2, 3, 3, 3), (2, 3)], False),
    "depthwise_pool": (lambda x, w, b: (T.depthwise_conv_pool(x, w, b) * Tensor(np.random.default_rng(1).normal(size=(2, 2, 2, 3)))).sum(), [(2, 3, 5, 5), (2, 3, 3, 3), (2, 3)], False),
    "avg_pool": (lambda x: (T.avg_pool2d(x, 2) * Tensor(np.arange(8.0).reshape(1, 2, 2, 2))).sum(), [(1, 2, 4, 4)], False),
    "max_pool": (lambda x: (T.max_pool2d(x, 2) * Tensor(np.arange(8.0).reshape(1, 2, 2, 2))).sum(), [(1, 2, 4, 4)], False),
    "global_pools": (lambda x: (T.global_avg_pool(x) * T.global_max_pool(x)).sum(), [(2, 3, 4, 4)], False),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(name, seed):
    build, shapes, positive = OPS[name]
    check_grad(build, shapes, seed, positive)


def test_sigmoid_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(2, 2))
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(a)).data, a)


def test_depthwise_all_ones_sums_window():
    out = T.depthwise_conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros((1, 1))), padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_sigmoid_times_constant_gradient():
    w = Tensor(0.0, requires_grad=True)
    T.backward(T.sigmoid(w) * 4.0)
    assert w.grad == pytest.approx(1.0, abs=1e-15)


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        T.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_gradients_accumulate_until_zeroed():
    x = Tensor([1.0, -2.0], requires_grad=True)
    T.backward((x * 3.0).sum())
    T.backward((x * 3.0).sum())
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_counts_twice():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    T.backward(y * y)  # x^4 -> 4 x^3
    assert x.grad == pytest.approx(32.0)


def test_max_pool_routes_to_first_argmax():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.backward(T.max_pool2d(x, 2).sum())
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_global_max_pool_tie_goes_to_first():
    x = Tensor(np.full((1, 1, 3, 3), 2.0), requires_grad=True)
    T.backward(T.global_max_pool(x).sum())
    assert x.grad.sum() == 1.0 and x.grad[0, 0, 0, 0] == 1.0


def test_fused_depthwise_pool_tie_goes_to_first():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.zeros((1, 1, 3, 3)), requires_grad=True)
    b = Tensor(np.zeros((1, 1)), requires_grad=True)
    pooled = T.depthwise_conv_pool(x, w, b)
    T.backward(pooled[:, 1].sum())  # max branch only; every output equals 0
    assert b.grad.item() == 1.0
    # the first output position sees the padded corner: only 4 ones under the kernel
    expected = np.zeros((3, 3))
    expected[1:, 1:] = 1.0
    np.testing.assert_array_equal(w.grad[0, 0], expected)


def test_cross_entropy_value_and_gradient_rows():
    logits = Tensor(np.random.default_rng(3).normal(size=(5, 4)), requires_grad=True)
    labels = np.array([0, 3, 1, 1, 2])
    ce = T.softmax_cross_entropy(logits, labels)
    p = T.softmax(logits.data)
    assert ce.item() == pytest.approx(-np.mean(np.log(p[np.arange(5), labels])), rel=1e-12)
    assert ce.item() >= 0
    T.backward(ce)
    np.testing.assert_allclose(logits.grad.sum(axis=1), 0.0, atol=1e-15)


def test_division_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        Tensor([1.0]) / Tensor([0.0])


def test_non_finite_construction_raises():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_adamw_zero_gradient_no_decay_is_noop():
    p = np.array([1.0, -2.0])
    state = {}
    T.adamw_step([p], [np.zeros(2)], state, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    assert np.all(state["m"][0] == 0) and np.all(state["v"][0] == 0)


def test_adamw_first_step_moves_by_lr():
    p = np.array([0.0])
    T.adamw_step([p], [np.ones(1)], {}, lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    assert p[0] == pytest.approx(-0.1, abs=1e-8)


def test_adamw_decoupled_decay():
    p = np.array([2.0])
    T.adamw_step([p], [np.zeros(1)], {}, lr=0.1, weight_decay=0.5)
    assert p[0] == pytest.approx(2.0 * (1 - 0.05))


def test_optimizer_accepts_default_lr():
    opt = T.AdamW([Tensor([1.0], requires_grad=True)], lr=0.002)
    assert opt.lr == 0.002


def test_deterministic_graph():
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=(2, 3))
    outs = [T.depthwise_conv_pool(Tensor(x), Tensor(w), Tensor(b)).data for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(T.softmax(x).sum(axis=1), 1.0, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-3, 3)), arrays(np.float64, (2, 5), elements=st.floats(-3, 3)))
def test_add_mul_gradients_are_the_other_operand(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    T.backward((ta * tb).sum() + (ta + tb).sum())
    np.testing.assert_allclose(ta.grad, b + 1.0)
    np.testing.assert_allclose(tb.grad, a + 1.0)
