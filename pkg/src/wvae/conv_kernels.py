"""Raw 2-D convolution kernels on numpy arrays.

Three primitives cover both convolution and its transpose in forward and
backward passes:

    conv_forward      y  = conv(x, w)
    conv_grad_input   gx = conv^T(gy, w)     (also the transposed-conv forward)
    conv_grad_weight  gw = patches(x) . gy

Each is one BLAS sgemm over an im2col patch matrix laid out as
[C*kh*kw, B*Ho*Wo], so the batch folds into the matrix product.  float32
throughout: the contraction length (C*kh*kw) stays small enough here that
single-precision accumulation is orders of magnitude below test tolerances.
Convolution is cross-correlation (no kernel flip) with weight layout
[out_ch, in_ch, kh, kw].
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


def conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv output extent not integral: size={size} kernel={k} "
            f"stride={stride} pad={pad}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """[B,C,H,W] -> [C*kh*kw, B*Ho*Wo] patch matrix."""
    b, c, h, w = x.shape
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * ho * wo)
    return np.ascontiguousarray(cols, dtype=np.float32)


def _col2im(cols: np.ndarray, in_shape, kh, kw, stride, pad) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch columns back onto the image grid."""
    b, c, h, w = in_shape
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(w, kw, stride, pad)
    g6 = cols.reshape(c, kh, kw, b, ho, wo)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                g6[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def _flat_maps(y: np.ndarray) -> np.ndarray:
    """[B,C,H,W] -> [C, B*H*W], matching the im2col column order."""
    b, c, h, w = y.shape
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3).reshape(c, b * h * w))


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    b, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv channel mismatch: input {cin}, weight expects {cin_w}")
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(wd, kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    y = w.reshape(cout, -1) @ cols
    return np.ascontiguousarray(y.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))


def conv_grad_input(gy: np.ndarray, w: np.ndarray, stride, pad, in_hw) -> np.ndarray:
    """Gradient wrt the conv input; equally, the transposed-conv forward map."""
    b, cout, ho, wo = gy.shape
    cout_w, cin, kh, kw = w.shape
    if cout != cout_w:
        raise ShapeError(f"conv channel mismatch: grad {cout}, weight expects {cout_w}")
    h, wd = in_hw
    if ho != conv_out_extent(h, kh, stride, pad) or wo != conv_out_extent(
        wd, kw, stride, pad
    ):
        raise ShapeError(f"conv grad extent mismatch: got {ho}x{wo} for input {h}x{wd}")
    gcols = w.reshape(cout, -1).T @ _flat_maps(gy)
    return _col2im(gcols, (b, cin, h, wd), kh, kw, stride, pad)


def conv_grad_weight(gy: np.ndarray, x: np.ndarray, stride, pad, kshape) -> np.ndarray:
    b, cout, ho, wo = gy.shape
    kh, kw = kshape
    cols = _im2col(x, kh, kw, stride, pad)
    gw = _flat_maps(gy) @ cols.T
    return gw.reshape(cout, x.shape[1], kh, kw)
