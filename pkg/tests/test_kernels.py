"""Both kernel backends against each other and against direct definitions."""
import numpy as np
import pytest

from simtune import kernels
from simtune.kernels import _pure

needs_fast = pytest.mark.skipif(not kernels.fast_available(), reason="compiled kernels not built")


def _backends():
    names = ["pure"] + (["fast"] if kernels.fast_available() else [])
    return [kernels.backend_module(n) for n in names]


BACKENDS = _backends()
CONV_CASES = [(1, 5, 5, 1, 3, 1, 1), (2, 7, 6, 3, 3, 2, 1), (3, 8, 8, 4, 1, 1, 0), (2, 9, 9, 2, 3, 2, 0)]


def _direct_conv(x, w, k, stride, pad):
    """Straight-loop convolution used as the im2col oracle."""
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = _pure.conv_out_size(h, k, stride, pad), _pure.conv_out_size(wd, k, stride, pad)
    kern = w.reshape(k, k, c, -1)
    out = np.zeros((n, ho, wo, w.shape[1]))
    for a in range(ho):
        for b in range(wo):
            patch = xp[:, a * stride : a * stride + k, b * stride : b * stride + k, :]
            out[:, a, b, :] = np.einsum("nijc,ijco->no", patch, kern)
    return out


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
@pytest.mark.parametrize("case", CONV_CASES)
def test_im2col_matches_direct_convolution(mod, case):
    n, h, w, c, k, stride, pad = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, h, w, c))
    weights = rng.standard_normal((k * k * c, 4))
    cols = mod.im2col(x, k, k, stride, pad)
    ho, wo = _pure.conv_out_size(h, k, stride, pad), _pure.conv_out_size(w, k, stride, pad)
    got = (cols @ weights).reshape(n, ho, wo, 4)
    np.testing.assert_allclose(got, _direct_conv(x, weights, k, stride, pad), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
@pytest.mark.parametrize("case", CONV_CASES)
def test_col2im_is_adjoint_of_im2col(mod, case):
    # <im2col(x), y> == <x, col2im(y)> for all x, y
    n, h, w, c, k, stride, pad = case
    rng = np.random.default_rng(1)
    x = rng.standard_normal((n, h, w, c))
    cols = mod.im2col(x, k, k, stride, pad)
    y = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * mod.col2im(y, x.shape, k, k, stride, pad))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@needs_fast
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("case", CONV_CASES)
def test_backends_agree_on_unfold(dtype, case):
    fast = kernels.backend_module("fast")
    n, h, w, c, k, stride, pad = case
    x = np.random.default_rng(2).standard_normal((n, h, w, c)).astype(dtype)
    a, b = _pure.im2col(x, k, k, stride, pad), fast.im2col(x, k, k, stride, pad)
    assert np.array_equal(a, b)
    out = np.empty_like(a)
    assert fast.im2col(x, k, k, stride, pad, out=out) is out
    assert np.array_equal(_pure.col2im(a, x.shape, k, k, stride, pad), fast.col2im(b, x.shape, k, k, stride, pad))


@needs_fast
@pytest.mark.parametrize("dtype, tol", [(np.float64, 0.0), (np.float32, 1e-6)])
def test_backends_agree_on_adam(dtype, tol):
    # float32 sqrt/division rounding may differ by an ulp; tolerance is 1e-3 of the learning rate
    fast = kernels.backend_module("fast")
    p0 = np.random.default_rng(3).standard_normal(257).astype(dtype)
    results = []
    for mod in (_pure, fast):
        p, m, v = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
        grad_rng = np.random.default_rng(4)
        for t in range(1, 20):
            g = grad_rng.standard_normal(p.shape).astype(dtype)
            mod.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1 - 0.9**t, 1 - 0.999**t, 1e-8)
        results.append((p, v))
    np.testing.assert_allclose(results[0][0], results[1][0], rtol=tol, atol=tol)
    np.testing.assert_allclose(results[0][1], results[1][1], rtol=tol, atol=tol)


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_stack_windows_layout(mod):
    rng = np.random.default_rng(5)
    frames = rng.integers(0, 256, size=(2, 10, 4, 4, 3), dtype=np.uint8)
    out = mod.stack_windows(frames, np.float64)
    assert out.shape == (2, 4, 4, 30)
    # channel 3*t + ch holds frame t, colour ch
    for t in range(10):
        np.testing.assert_allclose(out[..., 3 * t : 3 * t + 3], frames[:, t] / 255.0, rtol=1e-15)


@needs_fast
def test_backends_agree_on_stack_windows():
    frames = np.random.default_rng(6).integers(0, 256, size=(3, 10, 8, 8, 3), dtype=np.uint8)
    fast = kernels.backend_module("fast")
    for dtype in (np.float32, np.float64):
        assert np.array_equal(_pure.stack_windows(frames, dtype), fast.stack_windows(frames, dtype))


def test_out_buffer_checked():
    x = np.zeros((1, 4, 4, 1))
    for mod in BACKENDS:
        with pytest.raises(ValueError):
            mod.im2col(x, 3, 3, 1, 1, out=np.empty((3, 3)))


DRAW_CASES = [
    ("draw_circle", (7.3, 8.1, 3.2)),
    ("draw_circle", (0.0, 15.9, 5.0)),
    ("draw_segment", (2.0, 3.0, 12.5, 9.0, 1.1)),
    ("draw_segment", (5.0, 5.0, 5.0, 5.0, 2.0)),
    ("draw_rect", (2.3, 4.7, 11.2, 9.9)),
    ("draw_rect", (-3.0, 10.0, 20.0, 30.0)),
]


@needs_fast
@pytest.mark.parametrize("name, args", DRAW_CASES)
def test_backends_agree_on_rasterization(name, args):
    fast = kernels.backend_module("fast")
    color = (0.9, 0.2, 0.4)
    imgs = []
    for mod in (_pure, fast):
        img = np.full((16, 16, 3), 0.1)
        getattr(mod, name)(img, *args, color)
        imgs.append(img)
    np.testing.assert_array_equal(imgs[0], imgs[1])


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_circle_coverage_approximates_area(mod):
    img = np.zeros((64, 64, 3))
    mod.draw_circle(img, 31.7, 30.2, 12.0, (1.0, 1.0, 1.0))
    assert img[..., 0].sum() == pytest.approx(np.pi * 12.0**2, rel=0.01)
    assert img.max() <= 1.0 and img.min() >= 0.0


@pytest.mark.parametrize("mod", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_rect_coverage_is_exact_for_axis_aligned_box(mod):
    img = np.zeros((32, 32, 3))
    mod.draw_rect(img, 4.25, 6.5, 20.75, 11.5, (1.0, 1.0, 1.0))
    assert img[..., 0].sum() == pytest.approx(16.5 * 5.0, rel=1e-9)
