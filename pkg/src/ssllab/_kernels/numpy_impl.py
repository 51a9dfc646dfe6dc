"""Pure-numpy convolution kernels (im2col forward, per-tap backward).

Reference implementation and fallback for the compiled extension. Works for
any float dtype; output dtype follows the input.
"""

import numpy as np


def _check_conv_args(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernels, got {x.ndim}-d and {w.ndim}-d")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernels expect {w.shape[1]}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    kh, kw = w.shape[2], w.shape[3]
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )


def conv_out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def conv2d_forward(x, w, stride=1, padding=0):
    """Cross-correlate x[B,C,H,W] with kernels w[F,C,kh,kw] -> out[B,F,H',W']."""
    _check_conv_args(x, w, stride, padding)
    b, c, h, w_in = x.shape
    f, _, kh, kw = w.shape
    ho = conv_out_size(h, kh, stride, padding)
    wo = conv_out_size(w_in, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (b, c, ho, wo, kh, kw)
    patches = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    out = patches @ w.reshape(f, c * kh * kw).T
    return np.ascontiguousarray(out.reshape(b, ho, wo, f).transpose(0, 3, 1, 2))


def conv2d_backward_input(gout, w, input_shape, stride=1, padding=0):
    """Gradient of conv2d_forward w.r.t. the input, given gout[B,F,H',W']."""
    b, c, h, w_in = input_shape
    f, _, kh, kw = w.shape
    ho, wo = gout.shape[2], gout.shape[3]
    gx = np.zeros((b, c, h + 2 * padding, w_in + 2 * padding), dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            # (b, ho, wo, c) contribution of kernel tap (i, j)
            t = np.tensordot(gout, w[:, :, i, j], axes=([1], [0]))
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                t.transpose(0, 3, 1, 2)
            )
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gx)


def conv2d_backward_weights(gout, x, kernel_shape, stride=1, padding=0):
    """Gradient of conv2d_forward w.r.t. the kernels, given gout[B,F,H',W']."""
    f, c, kh, kw = kernel_shape
    ho, wo = gout.shape[2], gout.shape[3]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    gw = np.empty(kernel_shape, dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            gw[:, :, i, j] = np.tensordot(gout, xs, axes=([0, 2, 3], [0, 2, 3]))
    return gw
