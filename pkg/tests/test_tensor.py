import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from most import tensor as T
from most.tensor import GraphError, NonFiniteError, ShapeError, Tensor, backward, finite_diff_check, gradients


def _rng(seed):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- forward values


def test_conv_identity_kernel():
    x = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 3, 3)))


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_reduce_mean_2x2():
    assert T.reduce_mean(Tensor([[1.0, 2.0], [3.0, 4.0]])).item() == 2.5


def test_conv_matches_direct_loop():
    rng = _rng(3)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 5))
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(5):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_pool_and_upsample_values():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(T.avg_pool2d(x).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    up = T.upsample2x(Tensor(np.array([[[[1.0, 2.0]]]]))).data
    np.testing.assert_array_equal(up[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])


def test_box_mean_equals_uniform_conv_interior():
    x = _rng(0).random((2, 1, 12, 10))
    k = Tensor(np.full((1, 1, 7, 7), 1 / 49))
    via_conv = T.crop(T.conv2d(Tensor(x), k), 3).data
    np.testing.assert_allclose(T.box_mean(Tensor(x), 7).data, via_conv, atol=1e-14)


def test_dft2_matches_numpy():
    x = _rng(1).normal(size=(8, 8))
    re = T.apply_primitive("dft2", [Tensor(x)], inverse=False, part="re").data
    im = T.apply_primitive("dft2", [Tensor(x)], inverse=False, part="im").data
    ref = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x), norm="ortho"))
    np.testing.assert_allclose(re + 1j * im, ref, atol=1e-12)


# ---------------------------------------------------------------- backward


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(T.reduce_sum(T.square(x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_mean():
    x = Tensor(np.arange(4.0), requires_grad=True)
    backward(T.reduce_mean(x))
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_backward_relu_sum():
    x = Tensor([-1.0, 1.0], requires_grad=True)
    backward(T.reduce_sum(T.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_reused_tensor_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    z = y * y
    t = z * z
    backward(t)
    assert x.grad[0] == 8 * 3.0**7


def test_backward_twice_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.reduce_sum(T.square(x))
    backward(loss)
    with pytest.raises(GraphError, match="consumed"):
        backward(loss)


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError, match="scalar"):
        backward(T.square(x))


def test_backward_empty_graph():
    with pytest.raises(GraphError, match="empty graph"):
        backward(T.reduce_sum(Tensor([1.0])))


def test_gradients_zero_for_unreached_param():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([5.0], requires_grad=True)
    ga, gb = gradients(T.reduce_sum(T.square(a)), [a, b])
    assert ga[0] == 2.0 and gb[0] == 0.0


def test_untracked_graph_not_recorded():
    out = T.relu(Tensor([1.0]))
    assert out.node is None and not out.requires_grad


# ---------------------------------------------------------------- errors


def test_shape_mismatch_names_dimension():
    with pytest.raises(ShapeError, match="dimension 1"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 4)))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="dimension 1"):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 2))) * Tensor(np.ones((1, 2)))


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0]) / Tensor([0.0])


def test_pool_needs_even_size():
    with pytest.raises(ShapeError, match="dimension 3"):
        T.avg_pool2d(Tensor(np.ones((1, 1, 4, 5))))


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown primitive"):
        T.apply_primitive("fft3", [Tensor([1.0])])


# ---------------------------------------------------------------- finite differences


def test_fd_sum_squares():
    rep = finite_diff_check(lambda t: T.reduce_sum(T.square(t)), np.array([1.0, 2.0]))
    assert rep.max_rel_error < 1e-6


def test_fd_conv_mean():
    rng = _rng(0)
    k = Tensor(rng.normal(size=(1, 1, 3, 3)))
    rep = finite_diff_check(lambda t: T.reduce_mean(T.conv2d(t, k)), rng.normal(size=(1, 1, 8, 8)))
    assert rep.passed and rep.max_rel_error < 1e-4


def test_fd_constant_function():
    rep = finite_diff_check(lambda t: Tensor(3.0), np.ones(3))
    assert rep.max_rel_error == 0.0
    assert not rep.autodiff.any() and not rep.numeric.any()


def test_fd_rejects_nondeterministic():
    rng = _rng(0)
    with pytest.raises(ValueError, match="not deterministic"):
        finite_diff_check(lambda t: T.reduce_sum(t * Tensor(rng.normal(size=2))), np.ones(2))


def _weights(rng, *shape):
    return Tensor(rng.normal(size=shape))


# f(x) per primitive kind: every case is a scalar function of one 64-bit input
def _cases(rng):
    w3 = _weights(rng, 3, 2, 3, 3)
    b3 = _weights(rng, 3)
    m = _weights(rng, 4, 3)
    other = _weights(rng, 2, 2, 8, 8)
    proj = _weights(rng, 2, 2, 8, 8)
    r = rng.normal(size=(2, 2, 8, 8))

    def dot(t):
        # contract with fixed random weights so every output entry matters
        w = Tensor(rng_fixed[: t.size].reshape(t.shape))
        return T.reduce_sum(t * w)

    rng_fixed = rng.normal(size=2 * 4 * 16 * 16)

    return {
        "add": (lambda t: dot(t + other), r),
        "sub": (lambda t: dot(other - t), r),
        "mul": (lambda t: dot(t * other), r),
        "div": (lambda t: dot(other / (T.square(t) + Tensor(np.ones(t.shape)))), r),
        "scalar_mul": (lambda t: dot(T.scalar_mul(t, 1.7)), r),
        "scalar_mul_tensor": (lambda t: dot(T.scalar_mul(proj, T.reshape(T.reduce_mean(t), (1,)))), r),
        "matmul": (lambda t: dot(t @ m), rng.normal(size=(5, 4))),
        "conv2d": (lambda t: dot(T.conv2d(t, w3, b3)), r),
        "conv2d_weight": (lambda t: dot(T.conv2d(other, t)), rng.normal(size=(3, 2, 3, 3))),
        "bias_add": (lambda t: dot(T.bias_add(other, t)), rng.normal(size=2)),
        "relu": (lambda t: dot(T.relu(t)), r + np.sign(r) * 0.05),
        "sigmoid": (lambda t: dot(T.sigmoid(t)), r),
        "softplus": (lambda t: dot(T.softplus(t)), r),
        "square": (lambda t: dot(T.square(t)), r),
        "abs": (lambda t: dot(T.absolute(t)), r + np.sign(r) * 0.05),
        "avg_pool2d": (lambda t: dot(T.avg_pool2d(t)), r),
        "upsample_nearest2x": (lambda t: dot(T.upsample2x(t)), r),
        "concat_channels": (lambda t: dot(T.concat_channels(t, other, t)), r),
        "reduce_sum": (lambda t: T.reduce_sum(T.square(T.reduce_sum(t, axis=(2, 3)))), r),
        "reduce_mean": (lambda t: T.reduce_sum(T.square(T.reduce_mean(t, axis=1))), r),
        "reshape": (lambda t: dot(T.reshape(t, (4, 64))), r),
        "crop": (lambda t: T.reduce_sum(T.square(T.crop(t, 2))), r),
        "box_mean": (lambda t: dot(T.box_mean(t, 3)), r),
        "dft2": (lambda t: dot(T.apply_primitive("dft2", [t, other], inverse=False, part="im")), r),
        "dft2_inverse": (lambda t: dot(T.apply_primitive("dft2", [other, t], inverse=True, part="re")), r),
    }


CASE_NAMES = sorted(_cases(_rng(0)))


def test_every_primitive_has_a_case():
    covered = {n.replace("_weight", "").replace("_tensor", "").replace("_inverse", "") for n in CASE_NAMES}
    assert set(T.PRIMITIVES) <= covered


@pytest.mark.parametrize("name", CASE_NAMES)
def test_primitive_gradients_20_seeds(name):
    for seed in range(20):
        f, x = _cases(_rng(seed))[name]
        rep = finite_diff_check(f, x, eps=1e-5, tol=1e-4)
        assert rep.passed, f"{name} seed {seed}: rel err {rep.max_rel_error:.2e}"


# ---------------------------------------------------------------- properties


@settings(max_examples=30, deadline=None)
@given(
    hnp.arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
    st.floats(-2, 2),
    st.floats(-2, 2),
)
def test_linearity_of_backward(x, a, b):
    def grad_of(fn):
        t = Tensor(x, requires_grad=True)
        return gradients(fn(t), [t])[0]

    f = lambda t: T.reduce_sum(T.square(t))
    g = lambda t: T.reduce_sum(T.sigmoid(t))
    combo = grad_of(lambda t: T.scalar_mul(f(t), a) + T.scalar_mul(g(t), b))
    np.testing.assert_allclose(combo, a * grad_of(f) + b * grad_of(g), rtol=1e-10, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forward_backward_bit_identical(seed):
    def run():
        rng = _rng(seed)
        x = Tensor(rng.normal(size=(1, 1, 8, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
        loss = T.reduce_mean(T.square(T.relu(T.conv2d(x, w))))
        return gradients(loss, [x, w])

    for g1, g2 in zip(run(), run()):
        assert g1.tobytes() == g2.tobytes()


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=st.floats(-1e3, 1e3)))
def test_grad_shape_matches_data(x):
    t = Tensor(x, requires_grad=True)
    backward(T.reduce_sum(T.square(t)))
    assert t.grad.shape == x.shape
    np.testing.assert_allclose(t.grad, 2 * x)
