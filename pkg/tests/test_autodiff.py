import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enspost import autodiff as ad
from enspost.autodiff import DimensionError, Param, Tensor
from enspost.gradcheck import check_op


# -- channel_project ---------------------------------------------------------

def test_channel_project_identity():
    x = np.ones((1, 2, 1, 1))
    out = ad.channel_project(x, np.eye(2))
    np.testing.assert_array_equal(out.data, x)


def test_channel_project_zero_weight(rng):
    out = ad.channel_project(rng.standard_normal((3, 4, 2, 5)), np.zeros((4, 2)))
    assert out.shape == (3, 2, 2, 5)
    assert not out.data.any()


def test_channel_project_hand_dot():
    x = np.array([1.0, 2.0]).reshape(1, 2, 1, 1)
    out = ad.channel_project(x, np.array([[1.0], [-1.0]]))
    assert out.data.item() == -1.0


def test_channel_project_shape_error():
    with pytest.raises(DimensionError, match=r"\(1, 3, 2, 2\).*\(2, 4\)"):
        ad.channel_project(np.zeros((1, 3, 2, 2)), np.zeros((2, 4)))


# -- conv2d_5x5 --------------------------------------------------------------

def test_conv_delta_kernel_is_identity(rng):
    x = rng.standard_normal((2, 3, 6, 8))
    kernel = np.zeros((3, 3, 5, 5))
    for c in range(3):
        kernel[c, c, 2, 2] = 1.0
    out = ad.conv2d_5x5(x, kernel, np.zeros(3))
    np.testing.assert_allclose(out.data, x, rtol=0, atol=1e-15)


def test_conv_tap_counts():
    x = np.ones((1, 1, 8, 16))
    out = ad.conv2d_5x5(x, np.ones((1, 1, 5, 5)), np.zeros(1)).data[0, 0]
    assert out[4, 7] == 25.0          # interior
    assert out[0, 3] == 15.0          # lat row 0: two rows zero padded, lon wraps
    assert out[0, 0] == 15.0          # lon edge wraps, no loss of taps
    assert out[1, 0] == 20.0


def test_conv_kernel_size_error():
    with pytest.raises(ValueError, match="5, 5"):
        ad.conv2d_5x5(np.zeros((1, 1, 4, 8)), np.zeros((1, 1, 3, 3)), np.zeros(1))


@given(shift=st.integers(0, 15), seed=st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_conv_longitude_periodicity(shift, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 2, 5, 16))
    k, b = r.standard_normal((3, 2, 5, 5)), r.standard_normal(3)
    base = ad.conv2d_5x5(x, k, b).data
    rolled = ad.conv2d_5x5(np.roll(x, shift, axis=-1), k, b).data
    np.testing.assert_allclose(rolled, np.roll(base, shift, axis=-1), rtol=1e-12, atol=1e-12)


# -- relu ----------------------------------------------------------------------

def test_relu_values_and_subgradient():
    x = Tensor(np.array([-1.0, 0.0, 2.5]), requires_grad=True)
    y = ad.relu(x)
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.5])
    ad.sum(y).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


# -- layer_norm ----------------------------------------------------------------

def test_layer_norm_constant_member_gives_bias():
    x = np.full((2, 3, 4, 4), 7.0)
    x[1] = -2.0
    bias = np.array([0.5, -1.0, 2.0])
    out = ad.layer_norm(x, np.ones(3), bias).data
    np.testing.assert_allclose(out, np.broadcast_to(bias[:, None, None], x.shape), atol=1e-12)


def test_layer_norm_standardized_input_unchanged(rng):
    x = rng.standard_normal((3, 2, 4, 8))
    x = (x - x.mean(axis=(1, 2, 3), keepdims=True)) / x.std(axis=(1, 2, 3), keepdims=True)
    out = ad.layer_norm(x, np.ones(2), np.zeros(2), eps=1e-5).data
    np.testing.assert_allclose(out, x, atol=1e-4)


def test_layer_norm_permuted_copies(rng):
    a = rng.standard_normal((2, 4, 4))
    perm = rng.permutation(16)
    b = a.reshape(2, 16)[:, perm].reshape(2, 4, 4)
    out = ad.layer_norm(np.stack([a, b]), np.ones(2), np.zeros(2)).data
    np.testing.assert_allclose(out[1].reshape(2, 16), out[0].reshape(2, 16)[:, perm], atol=1e-14)


@given(seed=st.integers(0, 10_000), scale=st.floats(0.04, 50))
@settings(max_examples=30, deadline=None)
def test_layer_norm_moments(seed, scale):
    # inputs with variance >= 1e-3; eps kept negligible so the moments are exact
    x = np.random.default_rng(seed).standard_normal((3, 4, 5, 6)) * scale + 3.0
    out = ad.layer_norm(x, np.ones(4), np.zeros(4), eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=(1, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(1, 2, 3)), 1, atol=1e-5)


def test_layer_norm_default_eps_shrinks_variance(rng):
    x = rng.standard_normal((2, 3, 4, 8))
    var = x.var(axis=(1, 2, 3))
    out = ad.layer_norm(x, np.ones(3), np.zeros(3)).data
    np.testing.assert_allclose(out.var(axis=(1, 2, 3)), var / (var + 1e-5), rtol=1e-10)


# -- backward ------------------------------------------------------------------

def test_backward_sum():
    x = Tensor(np.zeros(2), requires_grad=True)
    ad.sum(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_backward_sum_relu():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    ad.sum(ad.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_backward_accumulates_until_zeroed():
    x = Param("x", np.array([1.0, 2.0]))
    for _ in range(2):
        ad.sum(ad.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    ad.sum(ad.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_non_scalar_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.relu(x).backward()


def test_no_grad_builds_no_graph():
    p = Param("p", np.ones(3))
    with ad.no_grad():
        y = ad.mul(p, p)
    assert not y.requires_grad and y._parents == ()


def test_reused_node_gradient():
    # x used along two paths: d/dx (x*x + x) = 2x + 1
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)
    ad.sum(y).backward()
    assert x.grad.item() == 7.0


# -- finite-difference checks for every differentiable op ----------------------

def _positive(r, shape):
    return np.abs(r.standard_normal(shape)) + 0.5


def _away_from_zero(r, shape):
    x = r.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.5, x)


OPS = {
    "add": (ad.add, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((3, 1))]),
    "sub": (ad.sub, lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
    "mul": (ad.mul, lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4,))]),
    "div": (ad.div, lambda r: [r.standard_normal((2, 3)), _positive(r, (2, 3))]),
    "scale": (lambda a: ad.scale(a, -2.5), lambda r: [r.standard_normal((3, 2))]),
    "exp": (ad.exp, lambda r: [r.standard_normal((3, 2))]),
    "sqrt": (ad.sqrt, lambda r: [_positive(r, (3, 2))]),
    "relu": (ad.relu, lambda r: [_away_from_zero(r, (3, 4))]),
    "softplus": (ad.softplus, lambda r: [r.standard_normal((3, 4)) * 3]),
    "sum_axis": (lambda a: ad.sum(a, axis=1), lambda r: [r.standard_normal((2, 3, 4))]),
    "mean_axes": (lambda a: ad.mean(a, axis=(0, 2), keepdims=True), lambda r: [r.standard_normal((2, 3, 4))]),
    "member_std_ddof0": (lambda a: ad.member_std(a, axis=-4, ddof=0, floor=1e-3),
                         lambda r: [r.standard_normal((4, 2, 3, 3))]),
    "member_std_ddof1": (lambda a: ad.member_std(a, axis=-4, ddof=1, floor=1e-6),
                         lambda r: [r.standard_normal((4, 2, 3, 3))]),
    "concat": (lambda a, b: ad.concat_channels([a, b]),
               lambda r: [r.standard_normal((2, 3, 2, 2)), r.standard_normal((2, 1, 2, 2))]),
    "take": (lambda a: ad.take(a, 1, axis=-3), lambda r: [r.standard_normal((2, 3, 2, 2))]),
    "reshape": (lambda a: ad.reshape(a, (6, 2)), lambda r: [r.standard_normal((3, 4))]),
    "softmax": (lambda a: ad.softmax(a, axis=-2), lambda r: [r.standard_normal((3, 4, 2))]),
    "channel_project": (ad.channel_project, lambda r: [r.standard_normal((3, 4, 2, 5)), r.standard_normal((4, 3))]),
    "conv2d_5x5": (ad.conv2d_5x5, lambda r: [r.standard_normal((2, 2, 4, 8)), r.standard_normal((3, 2, 5, 5)),
                                             r.standard_normal(3)]),
    "layer_norm": (lambda x, g, b: ad.layer_norm(x, g, b),
                   lambda r: [r.standard_normal((2, 3, 4, 4)), r.standard_normal(3), r.standard_normal(3)]),
    "gaussian_crps": (ad.gaussian_crps, lambda r: [r.standard_normal((3, 4)), _positive(r, (3, 4)),
                                                   r.standard_normal((3, 4))]),
    "einsum": (lambda a, b: ad.einsum("...jm,...im->...ij", a, b),
               lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 4))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    op, make = OPS[name]
    for seed in range(3):
        assert check_op(op, make(np.random.default_rng(seed)), seed=seed) < 1e-4


def test_random_composite_gradient(rng):
    def composite(x, k, b, g, lb, W):
        z = ad.relu(ad.conv2d_5x5(x, k, b))
        z = ad.layer_norm(z, g, lb)
        z = ad.channel_project(z, W)
        s = ad.member_std(z, axis=-4, ddof=1, floor=1e-3)
        return ad.mul(ad.softplus(z), s)

    arrays = [rng.standard_normal((3, 2, 4, 8)), rng.standard_normal((3, 2, 5, 5)) * 0.3,
              rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3),
              rng.standard_normal((3, 2))]
    assert check_op(composite, arrays) < 1e-4


# -- member-axis equivariance ---------------------------------------------------

@pytest.mark.parametrize("op", [
    lambda x: ad.relu(x),
    lambda x: ad.softplus(x),
    lambda x: ad.layer_norm(x, np.linspace(0.5, 1.5, 3), np.linspace(-1, 1, 3)),
    lambda x: ad.conv2d_5x5(x, np.random.default_rng(7).standard_normal((2, 3, 5, 5)), np.ones(2)),
    lambda x: ad.channel_project(x, np.random.default_rng(8).standard_normal((3, 4))),
])
def test_member_axis_equivariance(op, rng):
    x = rng.standard_normal((5, 3, 4, 8))
    perm = rng.permutation(5)
    np.testing.assert_array_equal(op(x[perm]).data, op(x).data[perm])


def test_float32_stays_float32(rng):
    x = Param("x", rng.standard_normal((2, 3, 4, 8)).astype(np.float32))
    k = Param("k", rng.standard_normal((2, 3, 5, 5)).astype(np.float32))
    b = Param("b", np.zeros(2, np.float32))
    y = ad.sum(ad.mul(ad.conv2d_5x5(x, k, b), 0.5))
    assert y.dtype == np.float32
    y.backward()
    assert x.grad.dtype == np.float32 and k.grad.dtype == np.float32


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_non_finite(monkeypatch):
    monkeypatch.setattr(ad, "DEBUG", True)
    with pytest.raises(FloatingPointError):
        ad.div(np.ones(2), np.zeros(2))
