import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from margintrack import tensor as T
from gradcheck import input_errors

TOL = 1e-4


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(np.zeros(2)).data, [0.5, 0.5])


def test_relu_values():
    np.testing.assert_array_equal(T.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])


@pytest.mark.parametrize("k", range(10))
def test_cross_entropy_uniform_logits(k):
    assert T.cross_entropy(np.zeros(10), k).data == pytest.approx(math.log(10), abs=1e-12)
    assert math.log(10) == pytest.approx(2.302585, abs=1e-6)


def test_square_gradient():
    x = T.Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_cross_entropy_gradient_closed_form():
    rng = np.random.default_rng(0)
    z = T.Tensor(rng.normal(size=7), requires_grad=True)
    T.cross_entropy(z, 3).backward()
    expected = T._softmax_np(z.data)
    expected[3] -= 1.0
    np.testing.assert_allclose(z.grad, expected, atol=1e-14)


def test_backward_requires_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.NotScalar):
        T.relu(x).backward()


def test_graph_consumed_after_backward():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.tsum(T.mul(x, x))
    y.backward()
    with pytest.raises(T.GraphConsumed):
        y.backward()


def test_retain_graph_allows_reuse():
    x = T.Tensor(np.arange(3.0), requires_grad=True)
    y = T.tsum(T.mul(x, x))
    y.backward(retain_graph=True)
    y.backward()
    np.testing.assert_allclose(x.grad, 4 * np.arange(3.0))


def test_unreachable_leaf_gets_zero_gradient():
    x = T.Tensor(np.ones(2), requires_grad=True)
    unused = T.Tensor(np.ones((2, 2)), requires_grad=True)
    gx, gu = T.grad(T.tsum(x), [x, unused])
    np.testing.assert_array_equal(gx, [1.0, 1.0])
    np.testing.assert_array_equal(gu, np.zeros((2, 2)))


def test_shared_subexpression_visited_once():
    x = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    h = T.relu(x)
    y = T.tsum(T.add(h, h))
    (g,) = T.grad(y, [x])
    np.testing.assert_array_equal(g, [2.0, 0.0])


@pytest.mark.parametrize("fn, args", [
    (T.matmul, (np.ones((2, 3)), np.ones((2, 3)))),
    (T.linear, (np.ones((2, 3)), np.ones((4, 2)))),
    (T.add, (np.ones((2, 3)), np.ones((4,)))),
    (T.conv2d, (np.ones((1, 2, 5, 5)), np.ones((3, 1, 3, 3)))),
    (T.maxpool2d, (np.ones((5, 5)),)),
    (T.add_bias, (np.ones((2, 3)), np.ones(4))),
])
def test_shape_mismatch(fn, args):
    with pytest.raises(T.ShapeMismatch):
        fn(*args)


# ---------------------------------------------------------------------------
# finite-difference checks on randomized shapes


def _check(build, *arrays_, seed=0):
    for i, err in enumerate(input_errors(build, *arrays_, seed=seed)):
        assert err < TOL, f"input {i}: rel err {err:.2e}"


SEEDS = range(4)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_matmul(seed):
    rng = np.random.default_rng(seed)
    n, k, m = rng.integers(1, 6, size=3)
    _check(T.matmul, rng.normal(size=(n, k)), rng.normal(size=(k, m)), seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_linear(seed):
    rng = np.random.default_rng(seed)
    n, i, o = rng.integers(1, 6, size=3)
    _check(T.linear, rng.normal(size=(n, i)), rng.normal(size=(o, i)), rng.normal(size=o), seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_add_bias(seed):
    rng = np.random.default_rng(seed)
    n, f = rng.integers(1, 6, size=2)
    _check(T.add_bias, rng.normal(size=(n, f)), rng.normal(size=f), seed=seed)
    _check(T.add_bias, rng.normal(size=(n, f, 3, 2)), rng.normal(size=f), seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_elementwise(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
    a, b = rng.normal(size=shape), rng.normal(size=shape)
    _check(T.add, a, b, seed=seed)
    _check(T.sub, a, b, seed=seed)
    _check(T.mul, a, b, seed=seed)
    _check(T.add, a, rng.normal(size=shape[-1:]), seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_relu(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 7))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    _check(T.relu, x, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("padding", ["valid", "same"])
def test_gradcheck_conv2d(seed, padding):
    rng = np.random.default_rng(seed)
    n, c, f = rng.integers(1, 3, size=3)
    k = int(rng.choice([1, 2, 3]))
    h, w = rng.integers(k, 6, size=2)
    _check(lambda x, wt, b: T.conv2d(x, wt, b, padding=padding),
           rng.normal(size=(n, c, h, w)), rng.normal(size=(f, c, k, k)), rng.normal(size=f), seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_maxpool(seed):
    rng = np.random.default_rng(seed)
    n, c = rng.integers(1, 3, size=2)
    h, w = rng.integers(2, 7, size=2)
    # well-separated values so no window has a near tie
    x = rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.1
    _check(T.maxpool2d, x, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_reductions_and_reshape(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 2))
    _check(lambda a: T.tsum(a, axis=1), x, seed=seed)
    _check(lambda a: T.mean(a, axis=0), x, seed=seed)
    _check(T.flatten, x, seed=seed)
    _check(lambda a: T.index(a, (slice(None), 2)), x, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_softmax_family(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(2, 8))))
    _check(T.softmax, z, seed=seed)
    _check(T.log_softmax, z, seed=seed)
    labels = rng.integers(0, z.shape[1], size=z.shape[0])
    _check(lambda a: T.cross_entropy(a, labels), z, seed=seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradcheck_composed_cnn(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(2, 1, 6, 6))
    w1 = rng.normal(size=(3, 1, 3, 3))
    w2 = rng.normal(size=(4, 12)) * 0.5
    labels = rng.integers(0, 4, size=2)

    def net(x, w1, w2):
        h = T.maxpool2d(T.relu(T.conv2d(x, w1, padding="valid")), 2)
        return T.cross_entropy(T.linear(T.flatten(h), w2), labels)

    _check(net, x, w1, w2, seed=seed)


# ---------------------------------------------------------------------------
# properties

finite_rows = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)),
                     elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_softmax_rows_are_distributions(z):
    p = T.softmax(z).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(finite_rows)
def test_cross_entropy_nonnegative(z):
    labels = np.arange(z.shape[0]) % z.shape[1]
    assert T.cross_entropy(z, labels).data >= 0


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 1, 8, 8))
    w = rng.normal(size=(2, 1, 3, 3))
    a = T.conv2d(x, w, padding="same").data
    b = T.conv2d(x, w, padding="same").data
    assert a.tobytes() == b.tobytes()
