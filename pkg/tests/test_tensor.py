from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from halobuild import tensor as T
from halobuild.errors import ContractViolation, GradientAuditError, UnsupportedConfiguration
from halobuild.tensor import ConvKernel, Tensor

import oracles as O


def rand(rng, *shape):
    return rng.standard_normal(shape)


def kernel(w, b=None, **kw):
    return ConvKernel(Tensor(w), None if b is None else Tensor(b), **kw)


# ---------------------------------------------------------------------------
# tensor object and autodiff tape
# ---------------------------------------------------------------------------

def test_default_dtype_is_float32_and_float64_is_kept():
    assert Tensor([[1, 2]]).dtype == np.float32
    x = Tensor(np.ones((1, 1, 2, 2)))
    assert x.dtype == np.float64
    assert T.sigmoid(x).dtype == np.float64
    assert T.sigmoid(Tensor(np.ones((1, 1, 2, 2), np.float32))).dtype == np.float32


def test_gradient_accumulates_over_shared_subexpressions():
    x = Tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
    y = T.sum_all(T.mul(x, x))              # d/dx x^2 = 2x, through one mul with two uses
    y.backward()
    np.testing.assert_allclose(x.grad, 6.0)
    T.sum_all(x).backward()                 # a second backward accumulates into .grad
    np.testing.assert_allclose(x.grad, 7.0)


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert y._parents == () and not y.requires_grad


def test_backward_needs_seed_for_non_scalar():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ContractViolation):
        T.relu(x).backward()


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def test_sigmoid_at_zero_is_half():
    np.testing.assert_array_equal(T.sigmoid(Tensor(np.zeros((1, 2, 3, 3)))).data, 0.5)


def test_sigmoid_stays_strictly_inside_unit_interval():
    s = T.sigmoid(Tensor(np.array([-1e4, -50, 0, 50, 1e4], np.float32).reshape(1, 1, 1, 5))).data
    assert np.all(s > 0) and np.all(s < 1)


def test_relu_nonnegative():
    r = T.relu(Tensor(np.linspace(-2, 2, 9).reshape(1, 1, 3, 3))).data
    assert r.min() == 0 and np.all(r >= 0)


def test_concat_keeps_argument_order():
    a = Tensor(np.zeros((1, 2, 4, 4)))
    b = Tensor(np.ones((1, 3, 4, 4)))
    c = T.concat_c([a, b])
    assert c.shape == (1, 5, 4, 4)
    assert c.data[:, :2].sum() == 0 and np.all(c.data[:, 2:] == 1)


def test_split_inverts_concat():
    rng = np.random.default_rng(0)
    x = Tensor(rand(rng, 1, 6, 2, 2))
    parts = T.split_c(x, [1, 2, 3])
    np.testing.assert_array_equal(T.concat_c(parts).data, x.data)
    with pytest.raises(ContractViolation):
        T.split_c(x, [2, 2])


def test_broadcast_mul_matches_channel_loop():
    rng = np.random.default_rng(1)
    x, g = rand(rng, 1, 3, 2, 2), rand(rng, 1, 3, 1, 1)
    out = T.mul(Tensor(x), Tensor(g)).data
    ref = np.empty_like(x)
    for c in range(3):
        for i in range(2):
            for j in range(2):
                ref[0, c, i, j] = x[0, c, i, j] * g[0, c, 0, 0]
    np.testing.assert_array_equal(out, ref)


@pytest.mark.parametrize("sa,sb", [((1, 3, 4, 4), (1, 2, 4, 4)), ((1, 3, 4, 4), (1, 3, 2, 1)),
                                   ((2, 3, 4, 4), (1, 3, 1, 1)), ((1, 3, 4, 4), (1, 3, 4))])
def test_illegal_broadcast_rejected(sa, sb):
    with pytest.raises(ContractViolation):
        T.add(Tensor(np.zeros(sa)), Tensor(np.zeros(sb)))


def test_mlp2_is_linear_relu_linear():
    rng = np.random.default_rng(2)
    v = rand(rng, 2, 4, 1, 1)
    w1, b1, w2, b2 = rand(rng, 3, 4), rand(rng, 3), rand(rng, 4, 3), rand(rng, 4)
    got = T.mlp2(Tensor(v), *map(Tensor, (w1, b1, w2, b2))).data
    ref = O.dense(O.relu(O.dense(v, w1, b1)), w2, b2)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_elementwise_dispatch():
    x = Tensor(np.zeros((1, 1, 2, 2)))
    np.testing.assert_array_equal(T.elementwise("sigmoid", x).data, 0.5)
    with pytest.raises(ContractViolation):
        T.elementwise("softmax", x)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def test_identity_1x1_kernel():
    rng = np.random.default_rng(3)
    x = rand(rng, 2, 4, 5, 5)
    out = T.conv2d(Tensor(x), kernel(np.eye(4).reshape(4, 4, 1, 1), np.zeros(4))).data
    np.testing.assert_array_equal(out, x)


def test_constant_field_depthwise_all_ones_gives_nine():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), kernel(np.ones((1, 1, 3, 3)), groups=1)).data
    np.testing.assert_array_equal(out, 9.0)


def test_depthwise_dilated_matches_nested_loops():
    rng = np.random.default_rng(4)
    x, w = rand(rng, 1, 2, 5, 5), rand(rng, 2, 1, 3, 3)
    got = T.conv2d(Tensor(x), kernel(w, groups=2, dilation=2)).data
    np.testing.assert_allclose(got, O.conv_loops(x, w, groups=2, dilation=2), atol=1e-6)


@pytest.mark.parametrize("cin,cout,k,groups,dilation,stride,mode,size", [
    (3, 4, 3, 1, 1, 1, "reflect", 6),
    (4, 6, 3, 2, 1, 1, "reflect", 5),
    (3, 3, 5, 3, 1, 1, "reflect", 7),
    (2, 2, 7, 2, 3, 1, "reflect", 4),       # dilated extent wider than the image
    (2, 3, 3, 1, 1, 2, "zero", 7),
    (2, 2, 3, 1, 2, 2, "reflect", 8),
])
def test_conv_matches_nested_loops(cin, cout, k, groups, dilation, stride, mode, size):
    rng = np.random.default_rng(size * 31 + k)
    x = rand(rng, 2, cin, size, size)
    w, b = rand(rng, cout, cin // groups, k, k), rand(rng, cout)
    got = T.conv2d(Tensor(x), kernel(w, b, groups=groups, dilation=dilation, stride=stride, padding_mode=mode)).data
    ref = O.conv_loops(x, w, b, groups=groups, dilation=dilation, stride=stride, mode=mode)
    np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-10)


def test_even_kernel_unsupported():
    with pytest.raises(UnsupportedConfiguration):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), kernel(np.zeros((1, 1, 2, 2))))


def test_channel_mismatch_rejected():
    with pytest.raises(ContractViolation):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), kernel(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ContractViolation):
        ConvKernel(Tensor(np.zeros((3, 1, 3, 3))), groups=2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    k = kernel(rand(rng, 3, 2, 3, 3), dilation=int(rng.integers(1, 3)))
    x, y = rand(rng, 1, 2, 6, 6), rand(rng, 1, 2, 6, 6)
    lhs = T.conv2d(Tensor(a * x + b * y), k).data
    rhs = a * T.conv2d(Tensor(x), k).data + b * T.conv2d(Tensor(y), k).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5 * (1 + np.abs(rhs).max()))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5), st.sampled_from([1, 3, 5, 7]), st.integers(1, 3))
def test_reflect_constant_field_law(seed, c, k, dilation):
    rng = np.random.default_rng(seed)
    w = rand(rng, 2, 3, k, k).astype(np.float32)
    out = T.conv2d(Tensor(np.full((1, 3, 8, 8), c, np.float32)), kernel(w, dilation=dilation)).data
    expect = c * w.astype(np.float64).sum(axis=(1, 2, 3))
    np.testing.assert_allclose(out, np.broadcast_to(expect[None, :, None, None], out.shape),
                               rtol=1e-5, atol=1e-5 * (1 + abs(c) * np.abs(w).sum()))


def test_primitives_bit_deterministic():
    rng = np.random.default_rng(5)
    x = rand(rng, 1, 3, 8, 8).astype(np.float32)
    k = kernel(rand(rng, 3, 1, 5, 5).astype(np.float32), groups=3)
    a = T.magnitude(T.crop_lf(T.spectral(T.conv2d(Tensor(x), k)), Fraction(1, 2))).data
    b = T.magnitude(T.crop_lf(T.spectral(T.conv2d(Tensor(x.copy()), k)), Fraction(1, 2))).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

def test_gap_mean():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert T.pool(x, "gap_spatial").data.item() == 2.5


def test_max_over_constant_channels():
    assert T.pool(Tensor(np.full((1, 3, 1, 1), 5.0)), "max_over_channels").data.item() == 5.0


def test_avg_over_channels_matches_pixel_loop():
    rng = np.random.default_rng(6)
    x = rand(rng, 1, 4, 2, 2)
    got = T.pool(Tensor(x), "avg_over_channels").data
    ref = np.zeros((1, 1, 2, 2))
    for i in range(2):
        for j in range(2):
            ref[0, 0, i, j] = (x[0, 0, i, j] + x[0, 1, i, j] + x[0, 2, i, j] + x[0, 3, i, j]) / 4
    np.testing.assert_allclose(got, ref, rtol=1e-15, atol=1e-15)


def test_gap_matches_loop_oracle():
    rng = np.random.default_rng(7)
    x = rand(rng, 2, 3, 5, 4)
    np.testing.assert_allclose(T.pool(Tensor(x), "gap_spatial").data, O.gap(x), rtol=1e-12)


def test_unknown_pool_rejected():
    with pytest.raises(ContractViolation):
        T.pool(Tensor(np.zeros((1, 1, 2, 2))), "median")


def test_bilinear_constant_extension():
    out = T.resize(Tensor(np.full((1, 1, 1, 1), 5.0)), "bilinear_up2").data
    assert out.shape == (1, 1, 2, 2) and np.all(out == 5)


def test_avg_down_constant():
    assert T.resize(Tensor(np.full((1, 1, 2, 2), 3.0)), "avg_down2").data.item() == 3.0


def test_half_pixel_hand_values():
    out = T.resize(Tensor(np.array([0.0, 2.0]).reshape(1, 1, 1, 2)), "bilinear_up2").data
    np.testing.assert_allclose(out[0, 0, 0], [0, 0.5, 1.5, 2])


@pytest.mark.parametrize("mode,factor", [("bilinear_up2", 2), ("bilinear_up4", 4)])
def test_bilinear_matches_pointwise_formula(mode, factor):
    rng = np.random.default_rng(factor)
    x = rand(rng, 1, 2, 3, 5)
    np.testing.assert_allclose(T.resize(Tensor(x), mode).data, O.bilinear_up(x, factor), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mode,factor", [("avg_down2", 2), ("avg_down4", 4)])
def test_avg_down_matches_block_means(mode, factor):
    rng = np.random.default_rng(10 + factor)
    x = rand(rng, 2, 2, 8, 8)
    np.testing.assert_allclose(T.resize(Tensor(x), mode).data, O.avg_down(x, factor), rtol=1e-12, atol=1e-12)


def test_non_divisible_downsample_rejected():
    with pytest.raises(ContractViolation):
        T.resize(Tensor(np.zeros((1, 1, 6, 6))), "avg_down4")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def test_norms_match_reference():
    rng = np.random.default_rng(8)
    x, g, b = rand(rng, 2, 4, 3, 5), rng.uniform(0.5, 1.5, 4), rand(rng, 4)
    np.testing.assert_allclose(T.channel_norm(Tensor(x), Tensor(g), Tensor(b)).data,
                               O.norm_over(x, (1,), g, b), rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(T.instance_norm(Tensor(x), Tensor(g), Tensor(b)).data,
                               O.norm_over(x, (2, 3), g, b), rtol=1e-10, atol=1e-10)


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

def test_constant_input_spectrum_is_dc_only():
    s = T.spectral(Tensor(np.full((1, 1, 4, 4), 1.5)))
    mag = s.magnitude().data[0, 0]
    assert mag[2, 2] == pytest.approx(1.5 * 16)
    mag[2, 2] = 0
    assert np.abs(mag).max() < 1e-12


def test_impulse_has_flat_magnitude():
    x = np.zeros((1, 1, 4, 4))
    x[0, 0, 0, 0] = 1
    np.testing.assert_allclose(T.spectral(Tensor(x)).magnitude().data, 1.0, atol=1e-12)


@pytest.mark.parametrize("h,w", [(8, 8), (5, 7), (16, 12), (32, 32)])
def test_spectrum_matches_direct_dft(h, w):
    rng = np.random.default_rng(h * w)
    x = rand(rng, 1, 2, h, w)
    s = T.spectral(Tensor(x))
    ref = O.center(O.dft2(x))
    np.testing.assert_allclose(s.re.data, ref.real, atol=1e-9 * h * w)
    np.testing.assert_allclose(s.im.data, ref.imag, atol=1e-9 * h * w)


def test_parseval_8x8():
    rng = np.random.default_rng(9)
    x = rand(rng, 1, 1, 8, 8)
    mag = T.spectral(Tensor(x)).magnitude().data
    assert (mag ** 2).sum() == pytest.approx(64 * (x ** 2).sum(), rel=1e-4)


def test_uncentered_spectrum_conjugate_symmetry():
    rng = np.random.default_rng(10)
    x = rand(rng, 1, 1, 6, 5)
    s = T.spectral(Tensor(x), centered=False)
    z = s.re.data[0, 0] + 1j * s.im.data[0, 0]
    flip = np.conj(z[(-np.arange(6)) % 6][:, (-np.arange(5)) % 5])
    np.testing.assert_allclose(z, flip, atol=1e-10)


def test_fftshift_centers_dc():
    s = T.fftshift(T.spectral(Tensor(np.ones((1, 1, 5, 6))), centered=False))
    mag = s.magnitude().data[0, 0]
    assert np.unravel_index(mag.argmax(), mag.shape) == (2, 3)
    with pytest.raises(ContractViolation):
        T.fftshift(s)


def test_crop_requires_centered():
    with pytest.raises(ContractViolation):
        T.crop_lf(T.spectral(Tensor(np.ones((1, 1, 4, 4))), centered=False), Fraction(1, 2))


@pytest.mark.parametrize("n", [1, 2, 3, 7, 8, 16, 17, 32, 64])
@pytest.mark.parametrize("ratio", [Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8)])
def test_crop_window_against_rule(n, ratio):
    assert T.crop_window(n, ratio) == O.window(n, ratio)
    lo, hi = T.crop_window(n, ratio)
    assert lo <= n // 2 < hi


def test_crop_shapes_and_containment():
    for n in (8, 13, 16, 32):
        windows = [T.crop_window(n, Fraction(1, d)) for d in (8, 4, 2, 1)]
        for (a0, a1), (b0, b1) in zip(windows, windows[1:]):
            assert b0 <= a0 and a1 <= b1
    s = T.crop_lf(T.spectral(Tensor(np.zeros((1, 2, 16, 12)))), Fraction(1, 4))
    assert s.shape == (1, 2, 4, 3)


def test_bad_crop_ratio_rejected():
    with pytest.raises(ContractViolation):
        T.crop_window(16, Fraction(1, 3))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (1, 2, 6, 6), elements=st.floats(-10, 10)), st.floats(0.01, 100))
def test_magnitude_homogeneity(x, c):
    a = T.spectral(Tensor(c * x)).magnitude().data
    b = c * T.spectral(Tensor(x)).magnitude().data
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-5 * (1 + np.abs(b).max()))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 32), st.integers(1, 32))
def test_parseval_and_symmetry_property(seed, h, w):
    x = np.random.default_rng(seed).standard_normal((1, 1, h, w)).astype(np.float32)
    s = T.spectral(Tensor(x), centered=False)
    re, im = s.re.data.astype(np.float64)[0, 0], s.im.data.astype(np.float64)[0, 0]
    energy = (re ** 2 + im ** 2).sum()
    assert abs(energy - h * w * (x.astype(np.float64) ** 2).sum()) <= 1e-4 * energy
    z = re + 1j * im
    mirror = np.conj(z[(-np.arange(h)) % h][:, (-np.arange(w)) % w])
    assert np.abs(z - mirror).max() <= 1e-5 * max(1.0, np.abs(z).max())


# ---------------------------------------------------------------------------
# gradient audit helper
# ---------------------------------------------------------------------------

def test_grad_check_linear_map_exact():
    x = np.random.default_rng(11).standard_normal((1, 2, 3, 3))
    assert T.grad_check(T.sum_all, x) < 1e-6


def test_grad_check_sigmoid():
    x = np.random.default_rng(12).uniform(-2, 2, (1, 2, 4, 4))
    assert T.grad_check(lambda t: T.sum_all(T.sigmoid(t)), x, eps=1e-3) < 1e-3


def test_grad_check_depthwise_conv():
    rng = np.random.default_rng(13)
    k = kernel(rand(rng, 2, 1, 3, 3), groups=2)
    assert T.grad_check(lambda t: T.sum_all(T.conv2d(t, k)), rand(rng, 1, 2, 6, 6), eps=1e-3) < 1e-3


def test_grad_check_eps_range():
    with pytest.raises(ContractViolation):
        T.grad_check(T.sum_all, np.zeros((1, 1, 2, 2)), eps=1e-6)


def test_grad_check_reports_non_finite_gradient():
    def f(t):
        from halobuild.tensor import _make
        return _make(np.asarray(t.data.sum()), (t,), lambda g: (np.full(t.shape, np.nan),))

    with pytest.raises(GradientAuditError, match="flat index 0"):
        T.grad_check(f, np.ones((1, 1, 2, 2)))


def test_grad_check_survives_relu_kink():
    # base point sits exactly on the kink; the jitter-and-retry path moves off it
    x = np.zeros((1, 1, 2, 2))
    err = T.grad_check(lambda t: T.sum_all(T.relu(t)), x, eps=1e-3, rng=np.random.default_rng(0))
    assert err < 1e-6
