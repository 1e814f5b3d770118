import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avlit import numerics as nx
from avlit.numerics import ShapeError, Tensor, precision

from gradcheck import check_gradients


def brute_conv1d(x, w, b, stride, padding, groups):
    Cin, T = x.shape
    Cout, Cg, K = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding)))
    Tout = (T + 2 * padding - K) // stride + 1
    out = np.zeros((Cout, Tout))
    per_group = Cout // groups
    for o in range(Cout):
        g = o // per_group
        for t in range(Tout):
            acc = 0.0
            for i in range(Cg):
                for k in range(K):
                    acc += w[o, i, k] * xp[g * Cg + i, t * stride + k]
            out[o, t] = acc + (b[o] if b is not None else 0.0)
    return out


def brute_conv2d(x, w, stride):
    Cin, H, W = x.shape
    Cout, _, KH, KW = w.shape
    Ho, Wo = (H - KH) // stride + 1, (W - KW) // stride + 1
    out = np.zeros((Cout, Ho, Wo))
    for o in range(Cout):
        for i in range(Ho):
            for j in range(Wo):
                out[o, i, j] = np.sum(w[o] * x[:, i * stride : i * stride + KH, j * stride : j * stride + KW])
    return out


# -- conv1d ------------------------------------------------------------------


def test_conv1d_encoder_length():
    assert nx.conv_output_length(32000, 40, 20, 0) == 1599
    x = Tensor(np.zeros((1, 32000)))
    w = Tensor(np.zeros((3, 1, 40)))
    assert nx.conv1d(x, w, stride=20).shape == (3, 1599)


def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 17)).astype(np.float32)
    out = nx.conv1d(Tensor(x), Tensor(np.ones((1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize(
    "cin,cout,k,stride,padding,groups",
    [(2, 3, 5, 1, 0, 1), (2, 3, 5, 2, 2, 1), (4, 4, 5, 2, 2, 4), (4, 6, 3, 1, 1, 2), (3, 2, 1, 1, 0, 1), (3, 2, 1, 2, 1, 1)],
)
def test_conv1d_matches_nested_loops(cin, cout, k, stride, padding, groups):
    rng = np.random.default_rng(cin * 100 + k)
    x = rng.standard_normal((cin, 11))
    w = rng.standard_normal((cout, cin // groups, k))
    b = rng.standard_normal(cout)
    with precision("float64"):
        out = nx.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding, groups=groups)
    np.testing.assert_allclose(out.data, brute_conv1d(x, w, b, stride, padding, groups), atol=1e-6)


def test_conv1d_shape_errors_name_axis():
    with pytest.raises(ShapeError) as err:
        nx.conv1d(Tensor(np.zeros((3, 10))), Tensor(np.zeros((2, 2, 3))))
    assert err.value.axis == "channels"
    with pytest.raises(ShapeError) as err:
        nx.conv1d(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 2, 9))))
    assert err.value.axis == "time"


# -- conv_transpose1d ----------------------------------------------------------


def test_conv_transpose1d_decoder_length():
    x = Tensor(np.zeros((4, 1599)))
    w = Tensor(np.zeros((4, 2, 40)))
    assert nx.conv_transpose1d(x, w, stride=20).shape == (2, 32000)


def test_conv_transpose1d_single_sample_is_scaled_kernel():
    w = np.random.default_rng(1).standard_normal((1, 1, 6))
    with precision("float64"):
        out = nx.conv_transpose1d(Tensor([[2.5]]), Tensor(w), stride=1)
    np.testing.assert_allclose(out.data[0], 2.5 * w[0, 0])


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (3, 1), (20, 0)])
def test_conv_transpose1d_is_adjoint_of_conv1d(stride, padding):
    rng = np.random.default_rng(stride)
    K = 40 if stride == 20 else 5
    T = 120 if stride == 20 else 15
    x = rng.standard_normal((3, T))
    w = rng.standard_normal((4, 3, K))
    with precision("float64"):
        y_shape = nx.conv1d(Tensor(x), Tensor(w), stride=stride, padding=padding).shape
        y = rng.standard_normal(y_shape)
        lhs = np.sum(nx.conv1d(Tensor(x), Tensor(w), stride=stride, padding=padding).data * y)
        back = nx.conv_transpose1d(Tensor(y), Tensor(w), stride=stride, padding=padding).data
        assert back.shape == x.shape
        rhs = np.sum(x * back)
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


# -- conv2d ----------------------------------------------------------------------


def test_conv2d_video_downsampling_shape():
    out = nx.conv2d(Tensor(np.zeros((1, 64, 64))), Tensor(np.zeros((4, 1, 2, 2))), stride=2)
    assert out.shape == (4, 32, 32)


def test_conv2d_ones_kernel_on_constant():
    out = nx.conv2d(Tensor(np.full((1, 6, 6), 1.5)), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_allclose(out.data, 6.0)


def test_conv2d_matches_nested_loops():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 4, 4))
    w = rng.standard_normal((2, 1, 2, 2))
    with precision("float64"):
        for stride in (1, 2):
            out = nx.conv2d(Tensor(x), Tensor(w), stride=stride)
            np.testing.assert_allclose(out.data, brute_conv2d(x, w, stride), atol=1e-6)


# -- interpolation and elementwise ---------------------------------------------------


def test_nearest_interp_repeat_and_identity():
    x = Tensor(np.array([[0.0, 1.0]]))
    np.testing.assert_array_equal(nx.nearest_interp1d(x, 4).data, [[0, 0, 1, 1]])
    y = Tensor(np.arange(5.0)[None])
    assert nx.nearest_interp1d(y, 5) is y


def test_nearest_interp_three_to_five():
    # floor(t * 3 / 5) for t = 0..4
    expected = [int(np.floor(t * 3 / 5)) for t in range(5)]
    assert expected == [0, 0, 1, 1, 2]
    np.testing.assert_array_equal(nx.nearest_indices(3, 5), expected)
    out = nx.nearest_interp1d(Tensor(np.array([[10.0, 20.0, 30.0]])), 5)
    np.testing.assert_array_equal(out.data, [[10, 10, 20, 20, 30]])


@given(st.integers(1, 12), st.integers(1, 5))
def test_nearest_interp_integer_multiple_repeats(F, factor):
    idx = nx.nearest_indices(F, F * factor)
    assert np.all(np.bincount(idx, minlength=F) == factor)


def test_leaky_relu_slope():
    assert nx.leaky_relu(Tensor([-1.0]), 0.3).data[0] == pytest.approx(-0.3)


def test_mul_by_zero():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    assert np.all(nx.mul(x, Tensor(np.zeros((3, 4)))).data == 0)


def test_norm_constant_channel_gives_shift():
    x = Tensor(np.full((2, 7), 3.0))
    scale = Tensor(np.array([2.0, 5.0]))
    shift = Tensor(np.array([0.5, -1.0]))
    out = nx.global_channel_norm(x, scale, shift)
    np.testing.assert_allclose(out.data, np.array([[0.5] * 7, [-1.0] * 7]))


def test_broadcast_rejects_mismatch():
    with pytest.raises(ShapeError):
        nx.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))))
    ok = nx.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 1))))
    assert ok.shape == (3, 4)


# -- backward ------------------------------------------------------------------------


def test_backward_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_is_2x():
    data = np.random.default_rng(0).standard_normal(5)
    x = Tensor(data, requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)


def test_backward_accumulates():
    x = Tensor(np.ones(3), requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_interior_nodes_get_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 3.0
    y.sum().backward()
    assert y.grad is not None and np.all(y.grad == 1)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad


RNG = np.random.default_rng(42)

PRIMITIVES = {
    "add": (lambda a, b: nx.add(a, b), [RNG.standard_normal((3, 4)), RNG.standard_normal((3, 1))]),
    "sub": (lambda a, b: nx.sub(a, b), [RNG.standard_normal((3, 4)), RNG.standard_normal(4)]),
    "mul": (lambda a, b: nx.mul(a, b), [RNG.standard_normal((3, 4)), RNG.standard_normal((1, 4))]),
    "div": (lambda a, b: nx.div(a, b), [RNG.standard_normal((3, 4)), RNG.uniform(1, 2, (3, 4))]),
    "log": (lambda a: nx.log(a), [RNG.uniform(0.5, 2, (5,))]),
    "clip": (lambda a: nx.clip(a, -0.5, 0.5), [np.array([-2.0, -0.2, 0.1, 0.3, 1.7])]),
    "relu": (lambda a: nx.relu(a), [np.array([-1.3, -0.2, 0.4, 2.0])]),
    "leaky_relu": (lambda a: nx.leaky_relu(a, 0.3), [np.array([-1.3, -0.2, 0.4, 2.0])]),
    "prelu_scalar": (lambda a, s: nx.prelu(a, s), [RNG.standard_normal((2, 3, 5)), np.array([0.25])]),
    "prelu_channel": (lambda a, s: nx.prelu(a, s), [RNG.standard_normal((2, 3, 5)), np.array([0.1, 0.2, 0.3])]),
    "sum_axis": (lambda a: a.sum(axis=1), [RNG.standard_normal((3, 4))]),
    "mean": (lambda a: a.mean(axis=-1, keepdims=True), [RNG.standard_normal((3, 4))]),
    "reshape": (lambda a: a.reshape(4, 3), [RNG.standard_normal((3, 4))]),
    "transpose": (lambda a: nx.transpose(a, (1, 0, 2)), [RNG.standard_normal((2, 3, 4))]),
    "getitem": (lambda a: a[:, 1:3], [RNG.standard_normal((3, 4))]),
    "concat": (lambda a, b: nx.concat([a, b], axis=1), [RNG.standard_normal((2, 3)), RNG.standard_normal((2, 2))]),
    "fit_length_trim": (lambda a: nx.fit_length(a, 3), [RNG.standard_normal((2, 5))]),
    "fit_length_pad": (lambda a: nx.fit_length(a, 7), [RNG.standard_normal((2, 5))]),
    "norm": (
        lambda x, s, b: nx.global_channel_norm(x, s, b),
        [RNG.standard_normal((2, 3, 6)), RNG.standard_normal(3), RNG.standard_normal(3)],
    ),
    "interp_up": (lambda a: nx.nearest_interp1d(a, 7), [RNG.standard_normal((2, 3))]),
    "interp_down": (lambda a: nx.nearest_interp1d(a, 3), [RNG.standard_normal((2, 7))]),
    "conv1d": (
        lambda x, w, b: nx.conv1d(x, w, b, stride=2, padding=1),
        [RNG.standard_normal((2, 3, 9)), RNG.standard_normal((4, 3, 3)), RNG.standard_normal(4)],
    ),
    "conv1d_pointwise": (
        lambda x, w, b: nx.conv1d(x, w, b),
        [RNG.standard_normal((2, 3, 6)), RNG.standard_normal((4, 3, 1)), RNG.standard_normal(4)],
    ),
    "conv1d_depthwise": (
        lambda x, w, b: nx.conv1d(x, w, b, stride=2, padding=2, groups=3),
        [RNG.standard_normal((2, 3, 9)), RNG.standard_normal((3, 1, 5)), RNG.standard_normal(3)],
    ),
    "conv1d_grouped": (
        lambda x, w: nx.conv1d(x, w, groups=2),
        [RNG.standard_normal((1, 4, 7)), RNG.standard_normal((6, 2, 3))],
    ),
    "conv_transpose1d": (
        lambda x, w, b: nx.conv_transpose1d(x, w, b, stride=2, padding=1),
        [RNG.standard_normal((2, 3, 5)), RNG.standard_normal((3, 2, 4)), RNG.standard_normal(2)],
    ),
    "conv2d": (
        lambda x, w, b: nx.conv2d(x, w, b, stride=2),
        [RNG.standard_normal((2, 2, 4, 4)), RNG.standard_normal((3, 2, 2, 2)), RNG.standard_normal(3)],
    ),
    "conv_transpose2d": (
        lambda x, w, b: nx.conv_transpose2d(x, w, b, stride=2),
        [RNG.standard_normal((1, 3, 2, 2)), RNG.standard_normal((3, 2, 2, 2)), RNG.standard_normal(2)],
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    build, arrays = PRIMITIVES[name]
    assert check_gradients(build, arrays) < 1e-4


def test_composite_gradient():
    rng = np.random.default_rng(5)

    def build(x, w1, s, w2, a):
        h = nx.conv1d(x, w1, stride=2, padding=1)
        h = nx.global_channel_norm(h, s, s * 0.5)
        h = nx.prelu(h, a)
        up = nx.nearest_interp1d(h, x.shape[-1])
        h = nx.concat([up, x], axis=1)
        h = nx.conv1d(h, w2)
        return nx.mul(h, x) - nx.leaky_relu(h, 0.3)

    arrays = [
        rng.standard_normal((2, 3, 8)),
        rng.standard_normal((3, 3, 3)),
        rng.uniform(0.5, 1.5, 3),
        rng.standard_normal((3, 6, 1)),
        np.array([0.2]),
    ]
    assert check_gradients(build, arrays) < 1e-4


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_adjoint_property_random(seed):
    rng = np.random.default_rng(seed)
    cin, cout, K, stride = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 4)
    T = int(K + stride * rng.integers(0, 6))
    x = rng.standard_normal((cin, T))
    w = rng.standard_normal((cout, cin, K))
    with precision("float64"):
        fx = nx.conv1d(Tensor(x), Tensor(w), stride=stride).data
        y = rng.standard_normal(fx.shape)
        aty = nx.conv_transpose1d(Tensor(y), Tensor(w), stride=stride).data
    assert aty.shape == x.shape
    assert abs(np.sum(fx * y) - np.sum(x * aty)) <= 1e-6 * max(1.0, np.abs(fx * y).sum())


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((2, 3, 20)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 5)).astype(np.float32), requires_grad=True)
        out = nx.conv1d(x, w, stride=2, padding=2)
        (out * out).sum().backward()
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_mac_counter_records_conv():
    with nx.count_macs() as rec:
        nx.conv1d(Tensor(np.zeros((3, 10))), Tensor(np.zeros((4, 3, 2))), stride=2)
    assert rec == [("conv1d", 2 * 3 * 4 * 5)]
