"""A small dense/conv network kernel with reverse-mode gradients.

Only what the search model needs: conv2d, dense, relu, flatten, a masked
logistic loss, Adam, sinusoidal scalar encoding and a flat checkpoint format.
Arrays are numpy, NHWC for images.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import kernels


class NumericalDivergence(RuntimeError):
    """A tensor became NaN or infinite."""


def check_finite(arrays, where: str) -> None:
    for i, a in enumerate(arrays):
        if not np.all(np.isfinite(a)):
            bad = int(np.size(a) - np.count_nonzero(np.isfinite(a)))
            raise NumericalDivergence(f"{where}: tensor {i} with shape {a.shape} has {bad} non-finite values")


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Workspace:
    """Reusable scratch arrays keyed by shape; avoids page-faulting large fresh allocations."""

    def __init__(self, max_entries=4):
        self.max_entries = max_entries
        self._bufs = {}

    def get(self, shape, dtype):
        key = (tuple(shape), np.dtype(dtype).str)
        buf = self._bufs.pop(key, None)
        if buf is None:
            buf = np.empty(shape, dtype=dtype)
        self._bufs[key] = buf
        while len(self._bufs) > self.max_entries:
            self._bufs.pop(next(iter(self._bufs)))
        return buf


class Layer:
    params: list
    grads: list

    def __init__(self):
        self.params = []
        self.grads = []

    def zero_grad(self):
        for g in self.grads:
            g.fill(0)


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng, dtype=np.float32, zero_init=False):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            w = he_uniform(rng, (in_dim, out_dim), in_dim, dtype)
        b = np.zeros(out_dim, dtype=dtype)
        self.params = [w, b]
        self.grads = [np.zeros_like(w), np.zeros_like(b)]
        self._x = None

    def output_shape(self, in_shape):
        if in_shape != (self.in_dim,):
            raise ValueError(f"dense expects ({self.in_dim},), got {in_shape}")
        return (self.out_dim,)

    def forward(self, x):
        self._x = x
        return x @ self.params[0] + self.params[1]

    def backward(self, g):
        self.grads[0] += self._x.T @ g
        self.grads[1] += g.sum(axis=0)
        return g @ self.params[0].T


class Conv2d(Layer):
    """Square-kernel convolution over NHWC input; padding defaults to ``kernel // 2``.

    Weights are stored as ``(kernel * kernel * in_ch, out_ch)`` matching the
    im2col column order (row, column, channel).
    """

    def __init__(self, in_ch, out_ch, kernel, stride, rng, dtype=np.float32, pad=None):
        super().__init__()
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, kernel, stride
        self.pad = kernel // 2 if pad is None else pad
        fan_in = in_ch * kernel * kernel
        w = he_uniform(rng, (fan_in, out_ch), fan_in, dtype)
        b = np.zeros(out_ch, dtype=dtype)
        self.params = [w, b]
        self.grads = [np.zeros_like(w), np.zeros_like(b)]
        self._cols = None
        self._in_shape = None
        self._work = Workspace()

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if c != self.in_ch:
            raise ValueError(f"conv2d expects {self.in_ch} channels, got {c}")
        ho = kernels.conv_out_size(h, self.k, self.stride, self.pad)
        wo = kernels.conv_out_size(w, self.k, self.stride, self.pad)
        if ho < 1 or wo < 1:
            raise ValueError(f"input {in_shape} too small for conv2d")
        return (ho, wo, self.out_ch)

    def forward(self, x):
        n = x.shape[0]
        ho, wo, _ = self.output_shape(x.shape[1:])
        self._in_shape = x.shape
        buf = self._work.get((n * ho * wo, self.k * self.k * self.in_ch), x.dtype)
        self._cols = kernels.im2col(x, self.k, self.k, self.stride, self.pad, out=buf)
        out = self._cols @ self.params[0] + self.params[1]
        return out.reshape(n, ho, wo, self.out_ch)

    def backward(self, g, need_input_grad=True):
        g2 = g.reshape(-1, self.out_ch)
        self.grads[0] += self._cols.T @ g2
        self.grads[1] += g2.sum(axis=0)
        if not need_input_grad:
            return None
        dcols = g2 @ self.params[0].T
        return kernels.col2im(dcols, self._in_shape, self.k, self.k, self.stride, self.pad)


class ReLU(Layer):
    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask


class Flatten(Layer):
    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g):
        return g.reshape(self._shape)


class LayerStack:
    """A sequence of layers with cached activations for one backward pass."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        self._ready = False

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"expected input (*, {self.input_shape}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        self._ready = True
        return x

    def backward(self, g, need_input_grad=True):
        """Accumulate parameter gradients and return the input gradient.

        With ``need_input_grad=False`` a leading conv skips its input
        gradient and ``None`` is returned.
        """
        if not self._ready:
            raise RuntimeError("backward called without a preceding forward")
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            if idx == 0 and not need_input_grad and isinstance(layer, Conv2d):
                g = layer.backward(g, need_input_grad=False)
            else:
                g = layer.backward(g)
        self._ready = False
        return g


class Adam:
    """Adam with bias correction, updating parameter arrays in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            kernels.adam_update(p, g, m, v, self.lr, b1, b2, c1, c2, self.eps)
        return self.params

    def state_arrays(self):
        return self.m + self.v


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def logistic_loss(logits, labels, mask):
    """Masked mean binary cross-entropy on logits; returns ``(loss, dloss/dlogits)``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape != labels.shape or logits.shape != mask.shape:
        raise ValueError("logits, labels and mask must share a shape")
    count = mask.sum()
    if count == 0:
        raise ValueError("every entry is masked")
    z = logits.astype(np.float64)
    per = np.logaddexp(0.0, z) - labels * z
    loss = float((per * mask).sum() / count)
    grad = (sigmoid(z) - labels) * mask / count
    return loss, grad.astype(logits.dtype)


def sinusoidal_encode(p, p_max, levels=6):
    """Encode scalars as ``(sin(2^k pi p/p_max), cos(2^k pi p/p_max))`` for k < levels.

    Works elementwise; the output gains a trailing axis of size ``2 * levels``.
    """
    p_max = np.asarray(p_max, dtype=np.float64)
    if np.any(p_max <= 0):
        raise ValueError("p_max must be positive")
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("p must be finite")
    scaled = (p / p_max)[..., None] * (np.pi * 2.0 ** np.arange(levels))
    out = np.empty(scaled.shape[:-1] + (2 * levels,))
    out[..., 0::2] = np.sin(scaled)
    out[..., 1::2] = np.cos(scaled)
    return out


# --- checkpoints ---------------------------------------------------------------
#
# Layout (all little-endian):
#   8 bytes  magic b"SIMTCKPT"
#   u32      format version (1)
#   u32      tensor count K
#   K times: u32 ndim, then ndim x u32 dims
#   float32 payload of every tensor, row-major, in table order

CKPT_MAGIC = b"SIMTCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, arrays) -> None:
    arrays = [np.asarray(a) for a in arrays]
    head = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(arrays))]
    for a in arrays:
        head.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
    with open(path, "wb") as fh:
        fh.write(b"".join(head))
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, off)
        shapes.append(struct.unpack_from(f"<{ndim}I", data, off + 4))
        off += 4 + 4 * ndim
    out = []
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        out.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy())
        off += 4 * n
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after payload")
    return out
