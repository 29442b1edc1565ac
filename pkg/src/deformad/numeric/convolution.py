"""Strided 2-D convolution and its transpose, vectorized via stride tricks.

Forward, input-gradient and kernel-gradient share one windowing helper so
the transpose convolution is literally the adjoint pair of the forward
convolution (its forward IS the conv input-gradient kernel).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, _make


def _windows(x, kh, kw, stride):
    # view (N, C, H', W', kh, kw) over a padded input; no copy
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return as_strided(
        x,
        shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def _pad2d(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d_forward(x, w, stride, padding):
    xp = _pad2d(x, padding)
    win = _windows(xp, w.shape[2], w.shape[3], stride)
    # (N,C,H',W',kh,kw) x (F,C,kh,kw) -> (N,H',W',F)
    out = np.tensordot(win, w, axes=((1, 4, 5), (1, 2, 3)))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_kernel_grad(dout, x, stride, padding, kshape):
    f, c, kh, kw = kshape
    xp = _pad2d(x, padding)
    win = _windows(xp, kh, kw, stride)
    # sum over batch and output positions
    g = np.tensordot(dout, win, axes=((0, 2, 3), (0, 2, 3)))
    return np.ascontiguousarray(g)


def conv2d_input_grad(dout, w, stride, padding, in_hw):
    h, w_in = in_hw
    f, c, kh, kw = w.shape
    n = dout.shape[0]
    oh, ow = dout.shape[2], dout.shape[3]
    # scatter strided dout onto the padded plane, then full correlation
    # with the spatially flipped, channel-swapped kernel
    hp, wp = h + 2 * padding, w_in + 2 * padding
    dil = np.zeros((n, f, hp + kh - 1, wp + kw - 1), dtype=dout.dtype)
    dil[:, :, kh - 1:kh - 1 + (oh - 1) * stride + 1:stride,
        kw - 1:kw - 1 + (ow - 1) * stride + 1:stride] = dout
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (C, F, kh, kw)
    gpad = conv2d_forward(dil, np.ascontiguousarray(w_flip), 1, 0)
    if padding:
        gpad = gpad[:, :, padding:padding + h, padding:padding + w_in]
    return np.ascontiguousarray(gpad)


def _check_conv_shapes(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got "
                         f"{x.ndim}-d input and {w.ndim}-d kernel")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]} "
                         f"channels, kernel expects {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got "
                         f"stride={stride}, padding={padding}")
    kh, kw = w.shape[2], w.shape[3]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input "
                         f"{x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding}")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with an FCkk kernel."""
    _check_conv_shapes(x.data, w.data, stride, padding)
    out = conv2d_forward(x.data, w.data, stride, padding)
    in_hw = (x.shape[2], x.shape[3])
    kshape = w.shape

    def backward(dout):
        return (conv2d_input_grad(dout, w.data, stride, padding, in_hw),
                conv2d_kernel_grad(dout, x.data, stride, padding, kshape))

    return _make(out, (x, w), "conv2d", backward)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; kernel layout (C_in, C_out, kh, kw).

    Output size is (H-1)*stride - 2*padding + kh, i.e. output_padding 0;
    with kh = 2*stride and padding = stride//2... in practice the model
    uses kh=4, stride=2, padding=1 which exactly doubles H and W.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv_transpose2d expects 4-d input and kernel")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d channel mismatch: input has "
                         f"{x.shape[1]} channels, kernel expects {w.shape[0]}")
    cin, cout, kh, kw = w.shape
    h_out = (x.shape[2] - 1) * stride - 2 * padding + kh
    w_out = (x.shape[3] - 1) * stride - 2 * padding + kw
    if h_out < 1 or w_out < 1:
        raise ValueError("conv_transpose2d output would be empty")
    out = conv2d_input_grad(x.data, w.data, stride, padding, (h_out, w_out))

    def backward(dout):
        dx = conv2d_forward(dout, w.data, stride, padding)
        dw = conv2d_kernel_grad(x.data, dout, stride, padding, w.shape)
        return dx, dw

    return _make(out, (x, w), "conv_transpose2d", backward)
