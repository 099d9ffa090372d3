import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ghostnetv3 import _kernels
from ghostnetv3 import tensor as T
from ghostnetv3.tensor import BatchNormParams, ConvKernel, NonFiniteError, ShapeError

from conftest import direct_conv2d, rel_err

# (c_in, c_out, k, stride, padding, groups, h, w)
CONV_CASES = [
    (3, 8, 3, 1, 1, 1, 7, 7),
    (4, 6, 3, 2, 1, 1, 9, 8),
    (4, 4, 5, 1, 2, 4, 8, 8),
    (6, 6, 3, 2, 1, 6, 7, 9),
    (8, 8, 1, 1, 0, 8, 5, 5),
    (4, 8, 3, 1, 0, 2, 6, 6),
    (5, 7, 1, 1, 0, 1, 4, 6),
    (5, 7, 1, 2, 0, 1, 5, 5),
    (3, 3, (1, 5), 1, (0, 2), 3, 6, 7),
    (3, 3, (5, 1), 1, (2, 0), 3, 6, 7),
    (2, 4, 2, 2, 0, 1, 6, 6),
]


@pytest.mark.parametrize("c_in,c_out,k,stride,pad,groups,h,w", CONV_CASES)
def test_conv2d_matches_direct_loops(c_in, c_out, k, stride, pad, groups, h, w):
    rng = np.random.default_rng(c_in * 100 + c_out)
    kh, kw = T._pair(k)
    x = rng.standard_normal((2, c_in, h, w)).astype(np.float32)
    wt = rng.standard_normal((c_out, c_in // groups, kh, kw)).astype(np.float32)
    b = rng.standard_normal(c_out).astype(np.float32)
    kern = ConvKernel(wt, b, stride, pad, groups)
    ref = direct_conv2d(x, wt, b, T._pair(stride), T._pair(pad), groups)
    out = T.conv2d(x, kern)
    assert out.shape == ref.shape
    assert rel_err(out, ref) <= 1e-5


def test_conv2d_output_shape_formula():
    k = ConvKernel(np.zeros((4, 3, 3, 3)), None, 2, 1)
    assert T.conv2d(np.zeros((1, 3, 11, 10)), k).shape == (1, 4, 6, 5)
    assert k.output_hw(11, 10) == (6, 5)


def test_conv2d_rejects_bad_input():
    k = ConvKernel(np.zeros((4, 3, 3, 3)))
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((1, 2, 8, 8)), k)
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((3, 8, 8)), k)
    with pytest.raises(ShapeError):
        T.conv2d(np.zeros((1, 3, 2, 2)), k)


def test_conv2d_raises_on_nan():
    k = ConvKernel(np.ones((1, 1, 1, 1)))
    x = np.zeros((1, 1, 2, 2), np.float32)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        T.conv2d(x, k)


def test_conv_kernel_validation():
    with pytest.raises(ShapeError):
        ConvKernel(np.zeros((4, 3, 3)))
    with pytest.raises(ShapeError):
        ConvKernel(np.zeros((4, 3, 3, 3)), bias=np.zeros(3))
    with pytest.raises(ShapeError):
        ConvKernel(np.zeros((3, 1, 3, 3)), groups=2)
    with pytest.raises(ShapeError):
        ConvKernel(np.zeros((4, 3, 3, 3)), stride=0)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba missing")
@pytest.mark.parametrize("stride", [1, 2])
def test_compiled_depthwise_matches_numpy(monkeypatch, stride):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((3, 5, 9, 9)).astype(np.float32)
    k = ConvKernel(rng.standard_normal((5, 1, 3, 3)), rng.standard_normal(5), stride, 1, 5)
    fast = T.conv2d(x, k)
    monkeypatch.setattr(_kernels, "HAVE_NUMBA", False)
    slow = T.conv2d(x, k)
    assert rel_err(fast, slow) <= 1e-6


def test_im2col_col2im_are_adjoint(rng):
    xp = rng.standard_normal((2, 3, 8, 7)).astype(np.float64)
    cols = T.im2col(xp, 3, 2, 2, 1, 3, 6)
    other = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * other)
    rhs = np.sum(xp * T.col2im(other, xp.shape, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def _bn(c, rng):
    return BatchNormParams(rng.uniform(0.5, 2, c), rng.standard_normal(c), rng.standard_normal(c),
                           rng.uniform(0.5, 2, c), 1e-5, 0.1)


def test_batchnorm_infer_formula(rng):
    p = _bn(4, rng)
    x = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
    ref = p.gamma[None, :, None, None] * (x - p.running_mean[None, :, None, None]) / np.sqrt(
        p.running_var[None, :, None, None] + 1e-5) + p.beta[None, :, None, None]
    assert rel_err(T.batchnorm_infer(x, p), ref) <= 1e-6


def test_batchnorm_train_statistics(rng):
    p = _bn(3, rng)
    x = (rng.standard_normal((4, 3, 5, 5)) * 3 + 1).astype(np.float32)
    y, new, _ = T.batchnorm_train(x, p)
    xhat = (y - p.beta[None, :, None, None]) / p.gamma[None, :, None, None]
    assert np.allclose(xhat.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    assert np.allclose(xhat.var(axis=(0, 2, 3)), 1, atol=1e-3)
    m = 4 * 25
    mean = x.astype(np.float64).mean(axis=(0, 2, 3))
    var = x.astype(np.float64).var(axis=(0, 2, 3)) * m / (m - 1)
    assert np.allclose(new.running_mean, 0.9 * p.running_mean + 0.1 * mean, atol=1e-5)
    assert np.allclose(new.running_var, 0.9 * p.running_var + 0.1 * var, rtol=1e-5)
    # the input params are untouched
    assert new is not p and not np.shares_memory(new.running_mean, p.running_mean)


@pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba missing")
def test_compiled_batchnorm_matches_numpy(monkeypatch, rng):
    p = _bn(6, rng)
    x = rng.standard_normal((3, 6, 4, 5)).astype(np.float32)
    y1, n1, (xh1, s1) = T.batchnorm_train(x, p)
    monkeypatch.setattr(_kernels, "HAVE_NUMBA", False)
    y2, n2, (xh2, s2) = T.batchnorm_train(x, p)
    assert rel_err(y1, y2) <= 1e-5
    assert rel_err(n1.running_var, n2.running_var) <= 1e-5


def test_batchnorm_params_validation():
    with pytest.raises(ValueError):
        BatchNormParams(np.ones(2), np.zeros(2), np.zeros(2), -np.ones(2))
    with pytest.raises(ShapeError):
        BatchNormParams(np.ones(2), np.zeros(3), np.zeros(2), np.ones(2))
    with pytest.raises(ValueError):
        BatchNormParams.identity(2, eps=-1.0)


def test_softmax_two_class_values():
    p = T.softmax(np.array([[1.0, 0.0]]))
    assert p[0, 0] == pytest.approx(0.73106, abs=1e-5)
    assert p[0, 1] == pytest.approx(0.26894, abs=1e-5)


def test_softmax_stable_for_large_logits():
    p = T.softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(p).all() and p[0, 0] == pytest.approx(1.0)
    assert np.allclose(np.exp(T.log_softmax(np.array([[3.0, 1.0, 0.2]]))).sum(), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=64))
def test_sigmoid_stays_strictly_inside_unit_interval(vals):
    y = T.sigmoid(np.array(vals, np.float32))
    assert np.all(y > 0) and np.all(y < 1)


def test_sigmoid_values():
    assert T.sigmoid(np.array([0.0], np.float32))[0] == 0.5
    assert T.sigmoid(np.array([2.0], np.float32))[0] == pytest.approx(1 / (1 + np.exp(-2.0)), rel=1e-6)


def test_relu():
    assert np.array_equal(T.relu(np.array([-1.0, 0.0, 2.0], np.float32)), [0, 0, 2])


def test_avg_pool_and_resize(rng):
    x = rng.standard_normal((1, 2, 6, 4)).astype(np.float32)
    p = T.avg_pool2d(x, 2)
    ref = x.reshape(1, 2, 3, 2, 2, 2).mean(axis=(3, 5))
    assert np.allclose(p, ref, atol=1e-6)
    up = T.nearest_resize(p, (6, 4))
    assert np.array_equal(up, T.nearest_upsample(p, 2))
    assert np.allclose(T.global_avg_pool(x)[..., 0, 0], x.mean(axis=(2, 3)), atol=1e-6)


def test_pool_too_small():
    with pytest.raises(ShapeError):
        T.avg_pool2d(np.zeros((1, 1, 1, 1)), 2)


def test_linear_and_concat(rng):
    x = rng.standard_normal((3, 5)).astype(np.float32)
    w = rng.standard_normal((2, 5)).astype(np.float32)
    b = np.array([1.0, -1.0], np.float32)
    assert np.allclose(T.linear(x, w, b), x @ w.T + b, atol=1e-6)
    with pytest.raises(ShapeError):
        T.linear(x, w.T)
    a = np.zeros((2, 3, 4, 4))
    assert T.concat_channels(a, np.zeros((2, 1, 4, 4))).shape == (2, 4, 4, 4)
    with pytest.raises(ShapeError):
        T.concat_channels(a, np.zeros((2, 1, 3, 4)))


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 4), groups_dw=st.booleans(), k=st.sampled_from([1, 3, 5]),
       s=st.integers(1, 2), hw=st.integers(5, 9))
def test_conv_is_linear_in_input(c, groups_dw, k, s, hw):
    rng = np.random.default_rng(c * 31 + k * 7 + s + hw)
    g = c if groups_dw else 1
    kern = ConvKernel(rng.standard_normal((c, c // g, k, k)), None, s, k // 2, g)
    x1 = rng.standard_normal((1, c, hw, hw)).astype(np.float32)
    x2 = rng.standard_normal((1, c, hw, hw)).astype(np.float32)
    lhs = T.conv2d(2 * x1 + x2, kern)
    rhs = 2 * T.conv2d(x1, kern) + T.conv2d(x2, kern)
    assert rel_err(lhs, rhs) <= 1e-5
