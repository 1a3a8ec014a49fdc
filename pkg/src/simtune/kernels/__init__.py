"""Hot kernels: NHWC im2col/col2im, fused Adam update, anti-aliased rasterization.

The compiled extension is used when it imports; otherwise the numpy
versions are used. ``SIMTUNE_KERNELS=pure`` forces the fallback,
``SIMTUNE_KERNELS=fast`` makes a missing extension an ImportError.
"""
import os

from . import _pure

_choice = os.environ.get("SIMTUNE_KERNELS", "auto").lower()
if _choice not in ("auto", "fast", "pure"):
    raise ImportError(f"SIMTUNE_KERNELS must be auto, fast or pure, got {_choice!r}")

_impl = _pure
BACKEND = "pure"
if _choice != "pure":
    try:
        from . import _fast as _impl  # noqa: F811
        BACKEND = "fast"
    except ImportError:
        if _choice == "fast":
            raise

conv_out_size = _pure.conv_out_size
im2col = _impl.im2col
col2im = _impl.col2im
adam_update = _impl.adam_update
stack_windows = _impl.stack_windows
draw_circle = _impl.draw_circle
draw_segment = _impl.draw_segment
draw_rect = _impl.draw_rect


def fast_available():
    try:
        from . import _fast  # noqa: F401
    except ImportError:
        return False
    return True


def backend_module(name):
    """Return the kernel module for ``name`` ('pure' or 'fast')."""
    if name == "pure":
        return _pure
    if name == "fast":
        from . import _fast
        return _fast
    raise ValueError(name)
