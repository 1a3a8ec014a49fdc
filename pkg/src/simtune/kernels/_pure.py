"""Numpy implementations of the hot kernels.

These are the reference versions; ``_fast.pyx`` must agree with them.
All shape arguments are in pixels, images are float64 ``(H, W, 3)`` canvases
and coordinates refer to pixel units with pixel centers at ``i + 0.5``.
"""
import numpy as np


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _check_out(out, shape, dtype, name):
    if out.shape != shape or out.dtype != dtype or not out.flags.c_contiguous:
        raise ValueError(f"{name}: out buffer has the wrong shape or dtype")


def im2col(x, kh, kw, stride, pad, out=None):
    """Unfold NHWC ``x`` of shape (N, H, W, C) to (N*Ho*Wo, kh*kw*C).

    ``out`` may supply a preallocated result buffer.
    """
    n, h, w, c = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    if out is None:
        out = np.empty((n * ho * wo, kh * kw * c), dtype=x.dtype)
    _check_out(out, (n * ho * wo, kh * kw * c), x.dtype, "im2col")
    cols = out.reshape(n, ho, wo, kh, kw, c)
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            j_end = j + stride * wo
            cols[:, :, :, i, j, :] = x[:, i:i_end:stride, j:j_end:stride, :]
    return out


def col2im(cols, shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to NHWC ``shape``."""
    n, h, w, c = shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            j_end = j + stride * wo
            out[:, i:i_end:stride, j:j_end:stride, :] += cols[:, :, :, i, j, :]
    if pad:
        return out[:, pad:-pad, pad:-pad, :]
    return out


def adam_update(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    """In-place Adam moment and parameter update for one float32 tensor."""
    f = p.dtype.type
    m *= f(beta1)
    m += f(1.0 - beta1) * g
    v *= f(beta2)
    v += f(1.0 - beta2) * (g * g)
    p -= f(lr) * (m / f(c1)) / (np.sqrt(v / f(c2)) + f(eps))


def stack_windows(frames, dtype=np.float32, out=None):
    """(B, W, S, S, 3) uint8 -> (B, S, S, 3W) scaled to [0, 1], frame-major channels."""
    b, w, s, s2, c = frames.shape
    dtype = np.dtype(dtype)
    if out is None:
        out = np.empty((b, s, s2, w * c), dtype=dtype)
    _check_out(out, (b, s, s2, w * c), dtype, "stack_windows")
    out.reshape(b, s, s2, w, c)[...] = frames.transpose(0, 2, 3, 1, 4)
    out *= dtype.type(1.0 / 255.0)
    return out


def _blend(img, alpha, color):
    for ch in range(3):
        img[:, :, ch] = img[:, :, ch] * (1.0 - alpha) + color[ch] * alpha


def _centers(img):
    h, w = img.shape[:2]
    ys = np.arange(h, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(w, dtype=np.float64)[None, :] + 0.5
    return ys, xs


def draw_circle(img, cx, cy, radius, color):
    ys, xs = _centers(img)
    dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    _blend(img, alpha, color)


def draw_segment(img, x0, y0, x1, y1, half_width, color):
    ys, xs = _centers(img)
    dx = x1 - x0
    dy = y1 - y0
    len2 = dx * dx + dy * dy
    if len2 > 0.0:
        t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / len2, 0.0, 1.0)
    else:
        t = np.zeros_like(xs + ys)
    px = x0 + t * dx
    py = y0 + t * dy
    dist = np.sqrt((xs - px) ** 2 + (ys - py) ** 2)
    alpha = np.clip(half_width + 0.5 - dist, 0.0, 1.0)
    _blend(img, alpha, color)


def draw_rect(img, x0, y0, x1, y1, color):
    ys, xs = _centers(img)
    ax = np.clip(np.minimum(xs - x0, x1 - xs) + 0.5, 0.0, 1.0)
    ay = np.clip(np.minimum(ys - y0, y1 - ys) + 0.5, 0.0, 1.0)
    _blend(img, ay * ax, color)
