# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pure.py``.

Same signatures and results; loops run without the GIL so rollouts
rendered from worker threads overlap.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sqrtf

cnp.import_array()

ctypedef fused real_t:
    float
    double


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


cdef void _im2col(real_t[:, :, :, ::1] x, real_t[:, ::1] cols, int kh, int kw,
                  int stride, int pad, int ho, int wo) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t b, oy, ox, ch, i, j, row, col, iy, ix
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                col = 0
                for i in range(kh):
                    iy = oy * stride + i - pad
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if 0 <= iy < h and 0 <= ix < w:
                            for ch in range(c):
                                cols[row, col + ch] = x[b, iy, ix, ch]
                        else:
                            for ch in range(c):
                                cols[row, col + ch] = 0
                        col += c


cdef void _col2im(real_t[:, ::1] cols, real_t[:, :, :, ::1] out, int kh, int kw,
                  int stride, int pad, int ho, int wo) noexcept nogil:
    cdef Py_ssize_t n = out.shape[0], h = out.shape[1], w = out.shape[2], c = out.shape[3]
    cdef Py_ssize_t b, oy, ox, ch, i, j, row, col, iy, ix
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                col = 0
                for i in range(kh):
                    iy = oy * stride + i - pad
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if 0 <= iy < h and 0 <= ix < w:
                            for ch in range(c):
                                out[b, iy, ix, ch] += cols[row, col + ch]
                        col += c


def im2col(x, int kh, int kw, int stride, int pad, out=None):
    x = np.ascontiguousarray(x)
    n, h, w, c = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    shape = (n * ho * wo, kh * kw * c)
    if out is None:
        cols = np.empty(shape, dtype=x.dtype)
    else:
        if out.shape != shape or out.dtype != x.dtype or not out.flags.c_contiguous:
            raise ValueError("im2col: out buffer has the wrong shape or dtype")
        cols = out
    if x.dtype == np.float32:
        _im2col[float](x, cols, kh, kw, stride, pad, ho, wo)
    elif x.dtype == np.float64:
        _im2col[double](x, cols, kh, kw, stride, pad, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2im(cols, shape, int kh, int kw, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    n, h, w, c = shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    out = np.zeros((n, h, w, c), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, out, kh, kw, stride, pad, ho, wo)
    elif cols.dtype == np.float64:
        _col2im[double](cols, out, kh, kw, stride, pad, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out


cdef void _adam(real_t[::1] p, real_t[::1] g, real_t[::1] m, real_t[::1] v, real_t lr,
                real_t b1, real_t b2, real_t c1, real_t c2, real_t eps) noexcept nogil:
    cdef Py_ssize_t k
    cdef real_t one_b1 = 1 - b1, one_b2 = 1 - b2, gk, mk, vk
    for k in range(p.shape[0]):
        gk = g[k]
        mk = m[k] * b1 + one_b1 * gk
        vk = v[k] * b2 + one_b2 * (gk * gk)
        m[k] = mk
        v[k] = vk
        if real_t is float:
            p[k] -= lr * (mk / c1) / (sqrtf(vk / c2) + eps)
        else:
            p[k] -= lr * (mk / c1) / (sqrt(vk / c2) + eps)


def adam_update(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
        raise ValueError("adam_update needs contiguous parameter and moment arrays")
    g = np.ascontiguousarray(g, dtype=p.dtype)
    if p.dtype == np.float32:
        _adam[float](p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                     lr, beta1, beta2, c1, c2, eps)
    elif p.dtype == np.float64:
        _adam[double](p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                      lr, beta1, beta2, c1, c2, eps)
    else:
        raise TypeError(f"unsupported dtype {p.dtype}")


def stack_windows(const unsigned char[:, :, :, :, ::1] frames, dtype=np.float32, out=None):
    """(B, W, S, S, 3) uint8 -> (B, S, S, 3W) scaled to [0, 1], frame-major channels."""
    cdef Py_ssize_t b = frames.shape[0], w = frames.shape[1], s = frames.shape[2], s2 = frames.shape[3]
    cdef Py_ssize_t i, t, y, x, ch
    if out is None:
        out = np.empty((b, s, s2, 3 * w), dtype=dtype)
    elif out.shape != (b, s, s2, 3 * w) or out.dtype != np.dtype(dtype) or not out.flags.c_contiguous:
        raise ValueError("stack_windows: out buffer has the wrong shape or dtype")
    cdef float[:, :, :, ::1] of
    cdef double[:, :, :, ::1] od
    cdef float scale_f = 1.0 / 255.0
    cdef double scale_d = 1.0 / 255.0
    if out.dtype == np.float32:
        of = out
        with nogil:
            for i in range(b):
                for y in range(s):
                    for x in range(s2):
                        for t in range(w):
                            for ch in range(3):
                                of[i, y, x, 3 * t + ch] = frames[i, t, y, x, ch] * scale_f
    else:
        od = out
        with nogil:
            for i in range(b):
                for y in range(s):
                    for x in range(s2):
                        for t in range(w):
                            for ch in range(3):
                                od[i, y, x, 3 * t + ch] = frames[i, t, y, x, ch] * scale_d
    return out


cdef inline double _clip01(double v) noexcept nogil:
    if v < 0.0:
        return 0.0
    if v > 1.0:
        return 1.0
    return v


cdef inline void _blend_px(double[:, :, ::1] img, Py_ssize_t y, Py_ssize_t x, double alpha,
                           double r, double g, double b) noexcept nogil:
    img[y, x, 0] = img[y, x, 0] * (1.0 - alpha) + r * alpha
    img[y, x, 1] = img[y, x, 1] * (1.0 - alpha) + g * alpha
    img[y, x, 2] = img[y, x, 2] * (1.0 - alpha) + b * alpha


def draw_circle(double[:, :, ::1] img, double cx, double cy, double radius, color):
    cdef double r = color[0], g = color[1], b = color[2]
    cdef Py_ssize_t y, x
    cdef double dx, dy, alpha
    with nogil:
        for y in range(img.shape[0]):
            dy = (y + 0.5) - cy
            for x in range(img.shape[1]):
                dx = (x + 0.5) - cx
                alpha = _clip01(radius + 0.5 - sqrt(dx * dx + dy * dy))
                _blend_px(img, y, x, alpha, r, g, b)


def draw_segment(double[:, :, ::1] img, double x0, double y0, double x1, double y1,
                 double half_width, color):
    cdef double r = color[0], g = color[1], b = color[2]
    cdef double sx = x1 - x0, sy = y1 - y0
    cdef double len2 = sx * sx + sy * sy
    cdef Py_ssize_t y, x
    cdef double px, py, t, ex, ey, alpha
    with nogil:
        for y in range(img.shape[0]):
            py = y + 0.5
            for x in range(img.shape[1]):
                px = x + 0.5
                if len2 > 0.0:
                    t = _clip01(((px - x0) * sx + (py - y0) * sy) / len2)
                else:
                    t = 0.0
                ex = px - (x0 + t * sx)
                ey = py - (y0 + t * sy)
                alpha = _clip01(half_width + 0.5 - sqrt(ex * ex + ey * ey))
                _blend_px(img, y, x, alpha, r, g, b)


def draw_rect(double[:, :, ::1] img, double x0, double y0, double x1, double y1, color):
    cdef double r = color[0], g = color[1], b = color[2]
    cdef Py_ssize_t y, x
    cdef double px, py, ax, ay
    with nogil:
        for y in range(img.shape[0]):
            py = y + 0.5
            ay = _clip01(min(py - y0, y1 - py) + 0.5)
            for x in range(img.shape[1]):
                px = x + 0.5
                ax = _clip01(min(px - x0, x1 - px) + 0.5)
                _blend_px(img, y, x, ay * ax, r, g, b)
