import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drag import tensor as T
from drag.errors import ContractError, DeterminismError, DimensionError, StaleGraphError
from drag.tensor import Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def naive_conv(x, w, stride, pad):
    cin, H, W = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, H + 2 * pad, W + 2 * pad))
    xp[:, pad : pad + H, pad : pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for r in range(Ho):
            for c in range(Wo):
                for i in range(cin):
                    for dr in range(k):
                        for dc in range(k):
                            out[o, r, c] += xp[i, r * stride + dr, c * stride + dc] * w[o, i, dr, dc]
    return out


# -- matmul ----------------------------------------------------------------------


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(2))).data, a)


def test_matmul_worked_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    expected = naive_matmul(a.data, b.data)
    assert np.array_equal(expected, [[19, 22], [43, 50]])
    assert np.array_equal((a @ b).data, expected)


def test_matmul_zero():
    out = T.matmul(Tensor(np.ones((3, 4))), Tensor(np.zeros((4, 2))))
    assert out.shape == (3, 2) and not out.data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


@pytest.mark.parametrize("seed", range(20))
def test_matmul_matches_loops(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 6, 3)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_matmul_associative(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (Tensor(rng.normal(size=s)) for s in ((3, 4), (4, 5), (5, 2)))
    np.testing.assert_allclose(((A @ B) @ C).data, (A @ (B @ C)).data, rtol=0, atol=1e-9)


# -- conv2d --------------------------------------------------------------------------


def test_conv_scaling_identity():
    out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)))
    assert np.array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv_impulse_response():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    k = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(k), padding=1).data[0]
    # cross-correlation stamps the kernel flipped in both axes around the impulse
    assert np.array_equal(out[1:4, 1:4], k[0, 0, ::-1, ::-1])
    out[1:4, 1:4] = 0
    assert not out.any()


def test_conv_matches_six_loops():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(T.conv2d(Tensor(x), Tensor(w)).data, naive_conv(x, w, 1, 0), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_stride_padding_oracle(seed, stride, pad):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, 7, 6)), rng.normal(size=(3, 2, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, naive_conv(x, w, stride, pad), atol=1e-12)
    assert got.shape[1:] == ((7 + 2 * pad - 3) // stride + 1, (6 + 2 * pad - 3) // stride + 1)


def test_conv_bias_and_batch():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
    for i in range(2):
        np.testing.assert_allclose(out[i], naive_conv(x[i], w, 1, 1) + b[:, None, None], atol=1e-12)


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), padding=1)


# -- elementwise ---------------------------------------------------------------------


def test_relu_signs():
    assert np.array_equal(T.elementwise("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_sigmoid_zero():
    assert T.elementwise("sigmoid", Tensor(0.0)).item() == 0.5


def test_square():
    assert np.array_equal(T.elementwise("square", Tensor([3.0, -2.0])).data, [9, 4])


def test_scalar_broadcast_only():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(T.add(x, Tensor(1.0)).data, x.data + 1)
    with pytest.raises(DimensionError):
        T.add(x, Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        T.elementwise("mul", x, Tensor(np.ones((3, 2))))


def test_unknown_elementwise():
    with pytest.raises(ContractError):
        T.elementwise("tanh", Tensor(1.0))


def test_sigmoid_saturates_finite():
    y = T.sigmoid(Tensor([-800.0, 800.0])).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


# -- softmax -----------------------------------------------------------------------


def test_softmax_uniform():
    assert np.array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_log_weights():
    got = T.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
    np.testing.assert_allclose(got, [1 / 6, 2 / 6, 3 / 6], rtol=0, atol=1e-15)


def test_softmax_overflow_against_high_precision():
    import mpmath

    mpmath.mp.dps = 50
    e0, e1 = mpmath.exp(1000), mpmath.exp(1001)
    oracle = [float(e0 / (e0 + e1)), float(e1 / (e0 + e1))]
    got = T.softmax(Tensor([1000.0, 1001.0])).data
    assert np.all(np.isfinite(got))
    np.testing.assert_allclose(got, oracle, rtol=1e-14)
    np.testing.assert_allclose(got, [0.2689, 0.7311], atol=1e-4)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-700, 700, allow_nan=False)), st.sampled_from([0, 1, -1]))
def test_softmax_slices_sum_to_one(x, axis):
    y = T.softmax(Tensor(x), axis=axis).data
    assert np.all(np.abs(y.sum(axis=axis) - 1.0) <= 1e-12)
    assert np.all(y >= 0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30, allow_nan=False)))
def test_softmax_strictly_positive_on_moderate_inputs(x):
    assert np.all(T.softmax(Tensor(x)).data > 0)


# -- reductions --------------------------------------------------------------------


def test_mean_all():
    assert T.reduce("mean", Tensor([[1.0, 3.0], [5.0, 7.0]])).item() == 4.0


def test_max_with_argmax_constant_ties_first():
    value, idx = T.reduce("max_with_argmax", Tensor(np.full((3, 3), 2.5)))
    assert value.item() == 2.5 and int(idx) == 0


def test_max_with_argmax_row_major_first():
    x = np.zeros((2, 3))
    x[0, 2] = x[1, 0] = 5.0
    _, idx = T.max_with_argmax(Tensor(x))
    assert int(idx) == 2


def test_sum_axis0_identity():
    assert np.array_equal(T.reduce("sum", Tensor(np.eye(3)), 0).data, [1, 1, 1])


def test_empty_axis():
    with pytest.raises(DimensionError):
        T.reduce_sum(Tensor(np.zeros((2, 0))), axis=1)
    with pytest.raises(DimensionError):
        T.reduce_mean(Tensor(np.zeros((0, 3))), axis=0)


def test_unknown_reduction():
    with pytest.raises(ContractError):
        T.reduce("median", Tensor([1.0]))


# -- backward ------------------------------------------------------------------------


def test_backward_sum():
    x = leaf([1.0, 2.0, 3.0])
    T.reduce_sum(x).backward()
    assert np.array_equal(x.grad, [1, 1, 1])


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    T.reduce_sum(T.square(x)).backward()
    assert np.array_equal(x.grad, [2, 4, 6])


def test_backward_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ContractError):
        T.square(x).backward()


def test_backward_twice_is_stale():
    x = leaf([1.0, 2.0])
    loss = T.reduce_sum(T.square(x))
    loss.backward()
    with pytest.raises(StaleGraphError):
        loss.backward()
    # a fresh forward works again and accumulates
    T.reduce_sum(T.square(x)).backward()
    assert np.array_equal(x.grad, [4, 8])


def test_backward_needs_tracked_loss():
    with pytest.raises(ContractError):
        T.reduce_sum(Tensor([1.0])).backward()


@pytest.mark.parametrize("seed", range(10))
def test_reuse_accumulates_branch_gradients(seed):
    # loss = sum(x*x + 3x) uses x three times; d/dx = 2x + 3
    rng = np.random.default_rng(seed)
    v = rng.normal(size=4)
    x = leaf(v)
    T.reduce_sum(x * x + T.scale(x, 3.0)).backward()
    np.testing.assert_allclose(x.grad, 2 * v + 3, rtol=0, atol=1e-14)


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad and y.is_leaf


# -- grad_check ----------------------------------------------------------------------


def test_grad_check_quadratic():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 4))
    theta = leaf(rng.normal(size=(4, 1)))
    f = lambda: T.reduce_sum(T.matmul(T.transpose(theta), T.matmul(Tensor(A), theta)))  # noqa: E731
    assert T.grad_check(f, [theta]) < 1e-9


def test_grad_check_sigmoid_chain():
    x = leaf(np.random.default_rng(1).normal(size=5))
    f = lambda: T.reduce_sum(T.sigmoid(T.sigmoid(T.sigmoid(x))))  # noqa: E731
    assert T.grad_check(f, [x]) < 1e-6


def test_grad_check_catches_wrong_backward():
    x = leaf(np.random.default_rng(2).normal(size=5))

    def f():
        # forward x³, backward claims 2x
        y = T.custom_op(lambda a: a**3, lambda g, a: (g * 2.0 * a,), x)
        return T.reduce_sum(y)

    assert T.grad_check(f, [x]) > 1e-2


def test_grad_check_nondeterministic():
    x = leaf([1.0, 2.0])
    rng = np.random.default_rng(0)
    f = lambda: T.reduce_sum(T.scale(x, rng.normal()))  # noqa: E731
    with pytest.raises(DeterminismError):
        T.grad_check(f, [x])


def test_grad_check_eps_positive():
    x = leaf([1.0])
    with pytest.raises(ContractError):
        T.grad_check(lambda: T.reduce_sum(x), [x], eps=0.0)


def test_grad_check_restores_parameters():
    x = leaf([0.3, -0.7])
    before = x.data.copy()
    T.grad_check(lambda: T.reduce_sum(T.square(x)), [x])
    assert x.data.dtype == np.float64 and np.array_equal(x.data, before)


# -- every differentiable op, many random shapes ----------------------------------


def _op_cases(rng):
    """(name, parameters, f) for one random small instance of every op."""
    m, k, n = (int(v) for v in rng.integers(1, 4, 3))
    a, b = leaf(rng.normal(size=(m, k))), leaf(rng.normal(size=(k, n)))
    u, v = leaf(rng.normal(size=(m, n))), leaf(rng.normal(size=(m, n)))
    s = leaf(rng.normal())
    pos = leaf(rng.uniform(0.5, 2.0, size=(m, n)))
    x4 = leaf(rng.normal(size=(2, 2, 5, 5)))
    w4 = leaf(rng.normal(size=(2, 2, 3, 3)))
    bias = leaf(rng.normal(size=2))
    wt = Tensor(rng.normal(size=(m, n)))
    bmat = leaf(rng.normal(size=(2, m, k)))
    bmat2 = leaf(rng.normal(size=(2, k, n)))
    idx = rng.integers(0, n, size=(m, 2))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))

    def wsum(t):
        # weighted sum so that every output entry gets a distinct cotangent
        return T.reduce_sum(T.mul(t, Tensor(np.linspace(0.5, 1.5, t.size).reshape(t.shape))))

    return [
        ("matmul", [a, b], lambda: wsum(T.matmul(a, b))),
        ("batched matmul", [bmat, bmat2], lambda: wsum(T.matmul(bmat, bmat2))),
        ("shared matmul", [bmat, b], lambda: wsum(T.matmul(bmat, b))),
        ("conv2d", [x4, w4, bias], lambda: wsum(T.conv2d(x4, w4, bias, stride=stride, padding=pad))),
        ("add", [u, v], lambda: wsum(T.add(u, v))),
        ("sub", [u, v], lambda: wsum(T.sub(u, v))),
        ("mul", [u, v], lambda: wsum(T.mul(u, v))),
        ("scalar mul", [u, s], lambda: wsum(T.mul(u, s))),
        ("scale", [u], lambda: wsum(T.scale(u, -1.7))),
        ("square", [u], lambda: wsum(T.square(u))),
        ("relu", [u], lambda: wsum(T.relu(u))),
        ("sigmoid", [u], lambda: wsum(T.sigmoid(u))),
        ("log", [pos], lambda: wsum(T.log(pos))),
        ("power", [pos], lambda: wsum(T.power(pos, -0.5))),
        ("clamp_min", [u], lambda: wsum(T.clamp_min(u, 0.1))),
        ("softmax", [u], lambda: wsum(T.softmax(u, axis=-1))),
        ("softmax axis0", [u], lambda: wsum(T.softmax(u, axis=0))),
        ("sum axis", [u], lambda: wsum(T.reduce_sum(u, axis=1, keepdims=True))),
        ("mean", [u], lambda: wsum(T.reduce_mean(u, axis=0))),
        ("max", [u], lambda: wsum(T.max_with_argmax(u, axis=1)[0])),
        ("reshape", [u], lambda: wsum(T.reshape(T.square(u), (-1,)))),
        ("transpose", [u], lambda: wsum(T.transpose(T.square(u)))),
        ("broadcast_to", [s], lambda: wsum(T.broadcast_to(T.reshape(s, (1, 1)), (m, n)))),
        ("broadcast row", [bias], lambda: wsum(T.broadcast_to(bias, (3, 2)))),
        ("concat", [u, v], lambda: wsum(T.concat([u, T.square(v)], axis=1))),
        ("index", [u], lambda: wsum(T.square(u)[:, -1:])),
        ("gather", [u], lambda: wsum(T.gather(u, idx, axis=1))),
        ("weighted", [u], lambda: T.reduce_sum(T.mul(T.square(u), wt))),
    ]


N_CASES = len(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("case", range(N_CASES))
def test_every_op_passes_grad_check_on_100_seeds(case):
    worst = 0.0
    for seed in range(100):
        name, params, f = _op_cases(np.random.default_rng([seed, case]))[case]
        worst = max(worst, T.grad_check(f, params))
    assert worst < 1e-4, f"{name}: {worst:.2e}"


def test_working_precision_roundtrip():
    with T.working_precision(np.longdouble):
        t = Tensor([1.0])
        assert t.data.dtype == np.longdouble
    assert Tensor([1.0]).data.dtype == np.float64


def test_check_finite():
    T.check_finite(Tensor([1.0]))
    with pytest.raises(FloatingPointError):
        T.check_finite(Tensor([math.inf]))


def test_parameters_checksum_changes():
    x = Tensor([1.0, 2.0])
    h1 = T.parameters_checksum([x])
    x.data[0] = 1.5
    assert T.parameters_checksum([x]) != h1
