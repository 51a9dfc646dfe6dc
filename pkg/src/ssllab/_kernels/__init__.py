"""Convolution kernel backend selection.

Two interchangeable implementations of the hot conv2d kernels:

* ``_convext``: compiled Cython extension (built by setup.py)
* ``numpy_impl``: pure-numpy im2col fallback, always available

The active backend is chosen once at import. Set ``SSLLAB_KERNELS=numpy``
or ``SSLLAB_KERNELS=ext`` to force a choice (``ext`` raises if the
extension was never built); the default ``auto`` prefers the extension.

Both backends are deterministic. They agree to float tolerance, not bit
for bit: summation order differs, so repeatability guarantees hold per
backend.
"""

import os

import numpy as np

from . import numpy_impl
from .numpy_impl import _check_conv_args, conv_out_size

try:
    from . import _convext
except ImportError:
    _convext = None

_choice = os.environ.get("SSLLAB_KERNELS", "auto").lower()
if _choice not in ("auto", "ext", "numpy"):
    raise RuntimeError(f"SSLLAB_KERNELS must be auto, ext or numpy, not {_choice!r}")
if _choice == "ext" and _convext is None:
    raise RuntimeError("SSLLAB_KERNELS=ext but the compiled extension is not built")

_use_ext = _convext is not None and _choice != "numpy"


def active_backend() -> str:
    """Name of the kernel backend selected at import ('ext' or 'numpy')."""
    return "ext" if _use_ext else "numpy"


def _c(a):
    return np.ascontiguousarray(a)


def conv2d_forward(x, w, stride=1, padding=0):
    if _use_ext:
        _check_conv_args(x, w, stride, padding)
        return _convext.conv2d_forward(_c(x), _c(w), stride, padding)
    return numpy_impl.conv2d_forward(x, w, stride, padding)


def conv2d_backward_input(gout, w, input_shape, stride=1, padding=0):
    if _use_ext:
        return _convext.conv2d_backward_input(_c(gout), _c(w), tuple(input_shape), stride, padding)
    return numpy_impl.conv2d_backward_input(gout, w, input_shape, stride, padding)


def conv2d_backward_weights(gout, x, kernel_shape, stride=1, padding=0):
    if _use_ext:
        return _convext.conv2d_backward_weights(_c(gout), _c(x), tuple(kernel_shape), stride, padding)
    return numpy_impl.conv2d_backward_weights(gout, x, kernel_shape, stride, padding)
