"""Central finite-difference checks of every layer's backward pass, in float64."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Dense, Flatten, LayerStack, ReLU, logistic_loss

STEP = 1e-4
TOLERANCE = 1e-3


@dataclass
class GradReport:
    name: str
    probes: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _probe(f, arr, analytic, idx, h, signature=None):
    """Relative error at one entry; ``None`` when ``signature()`` changes across the stencil."""
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    sig_up = signature() if signature else None
    arr[idx] = old - h
    down = f()
    sig_down = signature() if signature else None
    arr[idx] = old
    if signature is not None and not np.array_equal(sig_up, sig_down):
        return None
    return rel_error(float(analytic[idx]), (up - down) / (2.0 * h))


def _pick(rng, shape, n):
    flat = rng.choice(int(np.prod(shape)), size=min(n, int(np.prod(shape))), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def _probe_all(f, targets, rng, probes, h, signature=None):
    """Spread ``probes`` over (array, gradient) targets; small arrays pass their shortfall on.

    Probes whose stencil crosses a relu kink (per ``signature``) are dropped.
    """
    targets = sorted(targets, key=lambda t: t[0].size)
    errs, budget = [], probes
    for i, (arr, grad) in enumerate(targets):
        share = -(-budget // (len(targets) - i))
        picked = _pick(rng, arr.shape, share)
        got = [e for e in (_probe(f, arr, grad, idx, h, signature) for idx in picked) if e is not None]
        errs.extend(got)
        budget -= len(got)
    return errs


def _away_from_kinks(x, margin=1e-2):
    # keep relu inputs clear of 0 so a finite difference never straddles the kink
    return np.where(np.abs(x) < margin, np.copysign(margin, x), x)


def check_layer(name, layer, x, rng, probes=120, h=STEP) -> GradReport:
    """Probe input and parameter gradients of ``sum(layer(x) * r)`` for a fixed random ``r``."""
    out = layer.forward(x)
    r = rng.standard_normal(out.shape)

    def f():
        return float(np.sum(layer.forward(x) * r))

    layer.forward(x)
    if hasattr(layer, "zero_grad"):
        layer.zero_grad()
    dx = layer.backward(r)
    targets = [(x, dx)] + [(p, g.copy()) for p, g in zip(layer.params, layer.grads)]
    errs = _probe_all(f, targets, rng, probes, h)
    return GradReport(name, len(errs), max(errs))


def check_logistic_loss(rng, probes=120, h=STEP) -> GradReport:
    z = rng.standard_normal((16, 8)) * 2
    y = (rng.random((16, 8)) > 0.5).astype(np.float64)
    m = (rng.random((16, 8)) > 0.2).astype(np.float64)
    _, g = logistic_loss(z, y, m)
    errs = [_probe(lambda: logistic_loss(z, y, m)[0], z, g, idx, h) for idx in _pick(rng, z.shape, probes)]
    return GradReport("logistic_loss", len(errs), max(errs))


def check_stack(rng, probes=120, h=STEP) -> GradReport:
    """A conv -> relu -> conv -> relu -> flatten -> dense stack, composed end to end."""
    stack = LayerStack(
        [Conv2d(3, 4, 3, 2, rng, np.float64), ReLU(), Conv2d(4, 5, 3, 2, rng, np.float64), ReLU(), Flatten(),
         Dense(5 * 2 * 2, 3, rng, np.float64)],
        (8, 8, 3),
    )
    x = rng.standard_normal((2, 8, 8, 3))
    out = stack.forward(x)
    r = rng.standard_normal(out.shape)

    def f():
        return float(np.sum(stack.forward(x) * r))

    def relu_masks():
        return np.concatenate([layer._mask.ravel() for layer in stack.layers if isinstance(layer, ReLU)])

    stack.zero_grad()
    stack.forward(x)
    dx = stack.backward(r)
    targets = [(x, dx)] + [(p, g.copy()) for p, g in zip(stack.params, stack.grads)]
    errs = _probe_all(f, targets, rng, probes + 20, h, relu_masks)
    return GradReport("stack", len(errs), max(errs))


def run_all(seed=0, probes=120) -> list[GradReport]:
    rng = np.random.default_rng(seed)
    reports = [
        check_layer("dense", Dense(12, 8, rng, np.float64), rng.standard_normal((6, 12)), rng, probes),
        check_layer("conv2d_s1", Conv2d(3, 4, 3, 1, rng, np.float64), rng.standard_normal((2, 6, 6, 3)), rng, probes),
        check_layer("conv2d_s2", Conv2d(3, 4, 3, 2, rng, np.float64), rng.standard_normal((2, 7, 7, 3)), rng, probes),
        check_layer("relu", ReLU(), _away_from_kinks(rng.standard_normal((6, 30))), rng, probes),
        check_layer("flatten", Flatten(), rng.standard_normal((3, 4, 5, 2)), rng, probes),
        check_logistic_loss(rng, probes),
    ]
    reports.append(check_stack(rng, probes))
    return reports
