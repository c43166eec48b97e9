import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aganet import tensor as tn
from aganet.tensor import ConvSpec, ShapeError

from conftest import numeric_grad, rel_error


def conv_oracle(x, w, b, stride=(1, 1), pad=(0, 0)):
    """Direct nested-loop cross-correlation."""
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((c_in, h + 2 * pad[0], wd + 2 * pad[1]))
    xp[:, pad[0]:pad[0] + h, pad[1]:pad[1] + wd] = x
    ho = (h + 2 * pad[0] - kh) // stride[0] + 1
    wo = (wd + 2 * pad[1] - kw) // stride[1] + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(c_in):
                    for a in range(kh):
                        for e in range(kw):
                            acc += w[o, c, a, e] * xp[c, i * stride[0] + a, j * stride[1] + e]
                out[o, i, j] = acc
    return out


def test_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 7, 5))
    spec = ConvSpec(1, 1, in_channels=1, out_channels=1)
    out = tn.conv2d(x, spec, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out, x)


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 4), h=st.integers(1, 12), w=st.integers(1, 10), seed=st.integers(0, 999))
def test_identity_kernel_any_input(c, h, w, seed):
    x = np.random.default_rng(seed).normal(size=(c, h, w))
    spec = ConvSpec(1, 1, in_channels=c, out_channels=c)
    weight = np.eye(c).reshape(c, c, 1, 1)
    assert np.array_equal(tn.conv2d(x, spec, weight, np.zeros(c)), x)


def test_sd_conv_preserves_shape(rng):
    spec = ConvSpec(3, 5, 1, 1, 1, 2, in_channels=3, out_channels=8)
    out = tn.conv2d(rng.normal(size=(3, 100, 10)), spec, rng.normal(size=spec.weight_shape),
                    np.zeros(8))
    assert out.shape == (8, 100, 10)


def test_matches_nested_loop_oracle(rng):
    x = rng.normal(size=(1, 6, 4))
    w = rng.normal(size=(2, 1, 3, 3))
    b = rng.normal(size=2)
    spec = ConvSpec(3, 3, in_channels=1, out_channels=2)
    np.testing.assert_allclose(tn.conv2d(x, spec, w, b), conv_oracle(x, w, b), rtol=0, atol=1e-12)


@pytest.mark.parametrize("kh,kw,sh,sw,ph,pw", [
    (3, 5, 1, 1, 1, 2), (5, 1, 2, 1, 2, 0), (1, 1, 1, 1, 0, 0), (2, 3, 2, 2, 1, 0), (4, 2, 3, 1, 0, 1),
])
def test_strided_padded_vs_oracle(rng, kh, kw, sh, sw, ph, pw):
    x = rng.normal(size=(3, 11, 7))
    spec = ConvSpec(kh, kw, sh, sw, ph, pw, 3, 4)
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=4)
    np.testing.assert_allclose(tn.conv2d(x, spec, w, b), conv_oracle(x, w, b, (sh, sw), (ph, pw)),
                               rtol=0, atol=1e-12)


def test_batched_equals_per_sample(rng):
    spec = ConvSpec.same(3, 5, 2, 3)
    x = rng.normal(size=(4, 2, 9, 6))
    w, b = rng.normal(size=spec.weight_shape), rng.normal(size=3)
    batched = tn.conv2d(x, spec, w, b)
    for i in range(4):
        np.testing.assert_allclose(batched[i], tn.conv2d(x[i], spec, w, b), atol=1e-13)


def test_shape_errors_name_dims(rng):
    spec = ConvSpec(3, 3, in_channels=2, out_channels=1)
    with pytest.raises(ShapeError, match="3 channels"):
        tn.conv2d(rng.normal(size=(3, 5, 5)), spec, np.zeros((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError, match="weight shape"):
        tn.conv2d(rng.normal(size=(2, 5, 5)), spec, np.zeros((1, 2, 3, 2)), np.zeros(1))
    with pytest.raises(ShapeError, match="too small"):
        tn.conv2d(rng.normal(size=(2, 2, 5)), spec, np.zeros((1, 2, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError, match="upstream"):
        tn.conv2d_backward(rng.normal(size=(2, 5, 5)), spec, np.zeros((1, 2, 3, 3)),
                           np.zeros((1, 4, 4)))


def test_convspec_validation():
    with pytest.raises(ValueError):
        ConvSpec(0, 1)
    with pytest.raises(ValueError):
        ConvSpec(1, 1, stride_h=0)
    with pytest.raises(ValueError):
        ConvSpec(1, 1, pad_w=-1)


def test_zero_upstream_gives_zero_gradients(rng):
    spec = ConvSpec.same(3, 3, 2, 3)
    x = rng.normal(size=(2, 5, 5))
    gx, gw, gb = tn.conv2d_backward(x, spec, rng.normal(size=spec.weight_shape), np.zeros((3, 5, 5)))
    assert not gx.any() and not gw.any() and not gb.any()


def _conv_fd_check(rng, x_shape, spec):
    x = rng.normal(size=x_shape)
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=spec.out_channels)
    out = tn.conv2d(x, spec, w, b)
    up = rng.normal(size=out.shape)
    gx, gw, gb = tn.conv2d_backward(x, spec, w, up)

    def loss():
        return float(np.sum(up * tn.conv2d(x, spec, w, b)))

    assert rel_error(gx, numeric_grad(loss, x)) < 1e-6
    assert rel_error(gw, numeric_grad(loss, w)) < 1e-6
    assert rel_error(gb, numeric_grad(loss, b)) < 1e-6
    return up, gb


def test_backward_matches_finite_differences(rng):
    _conv_fd_check(rng, (1, 5, 5), ConvSpec(3, 3, in_channels=1, out_channels=2))


@pytest.mark.parametrize("shape,spec", [
    ((4, 32, 10), ConvSpec.same(3, 5, 4, 3)),
    ((3, 20, 10), ConvSpec.same(5, 1, 3, 4, stride_h=2)),
    ((2, 9, 7), ConvSpec(2, 3, 2, 2, 1, 1, 2, 2)),
])
def test_backward_fd_randomized_shapes(rng, shape, spec):
    _conv_fd_check(rng, shape, spec)


def test_bias_gradient_is_channel_sum(rng):
    spec = ConvSpec.same(3, 3, 2, 3)
    up = rng.normal(size=(3, 6, 4))
    _, _, gb = tn.conv2d_backward(rng.normal(size=(2, 6, 4)), spec,
                                  rng.normal(size=spec.weight_shape), up)
    np.testing.assert_allclose(gb, up.sum(axis=(1, 2)), atol=1e-13)


def test_relu_and_sigmoid_values():
    assert tn.sigmoid(np.array([0.0]))[0] == 0.5
    x = np.array([0.5, 3.0, 1e-9])
    assert not tn.relu(-x).any()
    big = tn.sigmoid(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(big)) and big[0] >= 0 and big[1] <= 1


def test_sigmoid_relu_gradients_fd(rng):
    x = rng.normal(size=(3, 4, 5))
    up = rng.normal(size=x.shape)
    y = tn.sigmoid(x)
    fd = numeric_grad(lambda: float(np.sum(up * tn.sigmoid(x))), x)
    assert np.max(np.abs(tn.sigmoid_backward(y, up) - fd)) < 1e-8
    fd = numeric_grad(lambda: float(np.sum(up * tn.relu(x))), x)
    assert np.max(np.abs(tn.relu_backward(x, up) - fd)) < 1e-8


def test_pool_time_values():
    col = np.array([[[1.0], [3.0], [2.0]]])  # (C=1, T=3, W=1)
    mx, _ = tn.pool_time(col, "max")
    av, _ = tn.pool_time(col, "avg")
    assert mx.item() == 3.0 and av.item() == 2.0
    const = np.full((2, 5, 3), 0.7)
    np.testing.assert_allclose(tn.pool_time(const, "max")[0], tn.pool_time(const, "avg")[0])
    np.testing.assert_allclose(tn.pool_time(const, "max")[0], 0.7)


def test_pool_time_max_backward_routes_to_argmax():
    col = np.array([[[1.0], [3.0], [2.0]]])
    _, cache = tn.pool_time(col, "max")
    g = tn.pool_time_backward(cache, np.ones((1, 1, 1)))
    np.testing.assert_array_equal(g[0, :, 0], [0.0, 1.0, 0.0])
    fd = numeric_grad(lambda: float(tn.pool_time(col, "max")[0].sum()), col)
    np.testing.assert_allclose(g, fd, atol=1e-8)


def test_pool_time_tie_goes_to_first_index():
    x = np.array([[[2.0], [2.0], [1.0]]])
    _, cache = tn.pool_time(x, "max")
    g = tn.pool_time_backward(cache, np.ones((1, 1, 1)))
    np.testing.assert_array_equal(g[0, :, 0], [1.0, 0.0, 0.0])


@pytest.mark.parametrize("mode", ["max", "avg"])
def test_pool_time_backward_fd(rng, mode):
    x = rng.normal(size=(2, 3, 7, 4))
    up = rng.normal(size=(2, 3, 1, 4))
    _, cache = tn.pool_time(x, mode)
    g = tn.pool_time_backward(cache, up)
    fd = numeric_grad(lambda: float(np.sum(up * tn.pool_time(x, mode)[0])), x)
    assert rel_error(g, fd) < 1e-6


def test_pool_time_rejects_empty():
    with pytest.raises(ShapeError):
        tn.pool_time(np.zeros((2, 0, 3)), "max")


def test_upsample_time():
    x = np.array([[[1.0], [2.0]]])
    np.testing.assert_array_equal(tn.upsample_time(x, 1), x)
    np.testing.assert_array_equal(tn.upsample_time(x, 2)[0, :, 0], [1.0, 1.0, 2.0, 2.0])
    with pytest.raises(ValueError):
        tn.upsample_time(x, 0)


def test_upsample_backward_fd(rng):
    x = rng.normal(size=(3, 5, 2))
    up = rng.normal(size=(3, 15, 2))
    g = tn.upsample_time_backward(up, 3)
    fd = numeric_grad(lambda: float(np.sum(up * tn.upsample_time(x, 3))), x)
    assert np.max(np.abs(g - fd)) < 1e-8


def test_forward_is_bit_deterministic(rng):
    spec = ConvSpec.same(3, 5, 3, 6)
    x, w, b = rng.normal(size=(3, 20, 10)), rng.normal(size=spec.weight_shape), rng.normal(size=6)
    assert np.array_equal(tn.conv2d(x, spec, w, b), tn.conv2d(x.copy(), spec, w.copy(), b.copy()))


def test_as_tensor_checks():
    t = tn.as_tensor([1, 2, 3, 4, 5, 6], shape=(2, 3))
    assert t.shape == (2, 3) and t.dtype == np.float64
    with pytest.raises(ShapeError):
        tn.as_tensor([1, 2, 3], shape=(2, 2))
    with pytest.raises(ValueError):
        tn.as_tensor([1.0, np.nan])
    assert np.isnan(tn.as_tensor([np.nan], checked=False)[0])
