"""Dense 2-D convolution and pooling kernels on numpy arrays.

Array convention, used everywhere in this package: a spatial map is a C
contiguous float32 array of shape (H, W, C) with the channel axis innermost;
convolution weights have shape (Hf, Wf, Cout, Cin). An output position (i, j)
reads the input window whose top-left corner is (i*sy - py, j*sx - px).
Reductions accumulate in float64 and results are stored back as float32.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FLOAT = np.float32


def as_tensor(x) -> np.ndarray:
    """Coerce to the package-wide float32 C-contiguous convention."""
    return np.ascontiguousarray(x, dtype=FLOAT)


def out_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    n = (size + 2 * pad - kernel) // stride + 1
    return n


def _windows(x: np.ndarray, kernel, stride, pad, fill=0.0) -> np.ndarray:
    """View of all input windows, shape (Ho, Wo, C, Hf, Wf)."""
    kh, kw = kernel
    sy, sx = stride
    py, px = pad
    if py or px:
        x = np.pad(x, ((py, py), (px, px), (0, 0)), constant_values=fill)
    win = sliding_window_view(x, (kh, kw), axis=(0, 1))
    return win[::sy, ::sx]


def conv2d(x: np.ndarray, weights: np.ndarray, stride, pad,
           bias: np.ndarray | None = None, out_dtype=FLOAT) -> np.ndarray:
    """Cross-correlation of (H, W, Cin) with (Hf, Wf, Cout, Cin) weights."""
    win = _windows(x, weights.shape[:2], stride, pad)
    y = np.tensordot(win.astype(np.float64), weights.astype(np.float64),
                     axes=([3, 4, 2], [0, 1, 3]))
    if bias is not None:
        y += bias.astype(np.float64)
    return y.astype(out_dtype)


def conv2d_transpose(r: np.ndarray, weights: np.ndarray, stride, pad,
                     out_hw, out_dtype=FLOAT) -> np.ndarray:
    """Adjoint of conv2d: scatter (N, Ho, Wo, Cout) back to (N, H, W, Cin).

    Loops over kernel offsets so the large (Ho, Wo, Hf, Wf, Cin) intermediate
    is never materialized.
    """
    kh, kw, _, cin = weights.shape
    sy, sx = stride
    py, px = pad
    h, w = out_hw
    n, ho, wo, _ = r.shape
    buf = np.zeros((n, h + 2 * py, w + 2 * px, cin), dtype=np.float64)
    r64 = r.astype(np.float64)
    w64 = weights.astype(np.float64)
    for a in range(kh):
        ys = slice(a, a + (ho - 1) * sy + 1, sy)
        for b in range(kw):
            xs = slice(b, b + (wo - 1) * sx + 1, sx)
            buf[:, ys, xs, :] += r64 @ w64[a, b]
    return buf[:, py:py + h, px:px + w, :].astype(out_dtype)


def window_sum(x: np.ndarray, kernel, stride, pad, out_dtype=FLOAT) -> np.ndarray:
    """Per-channel sum over each pooling window, shape (Ho, Wo, C)."""
    win = _windows(x, kernel, stride, pad)
    return win.astype(np.float64).sum(axis=(3, 4)).astype(out_dtype)


def window_scatter(r: np.ndarray, kernel, stride, pad, out_hw,
                   out_dtype=FLOAT) -> np.ndarray:
    """Adjoint of window_sum: spread (N, Ho, Wo, C) uniformly over windows."""
    kh, kw = kernel
    sy, sx = stride
    py, px = pad
    h, w = out_hw
    n, ho, wo, c = r.shape
    buf = np.zeros((n, h + 2 * py, w + 2 * px, c), dtype=np.float64)
    r64 = r.astype(np.float64)
    for a in range(kh):
        ys = slice(a, a + (ho - 1) * sy + 1, sy)
        for b in range(kw):
            xs = slice(b, b + (wo - 1) * sx + 1, sx)
            buf[:, ys, xs, :] += r64
    return buf[:, py:py + h, px:px + w, :].astype(out_dtype)


def maxpool2d(x: np.ndarray, kernel, stride, pad) -> np.ndarray:
    # padding must never win the max, so pad with -inf
    win = _windows(x, kernel, stride, pad, fill=-np.inf)
    return win.max(axis=(3, 4)).astype(FLOAT)


def avgpool2d(x: np.ndarray, kernel, stride, pad) -> np.ndarray:
    # zero padding counts toward the divisor (plain window mean)
    kh, kw = kernel
    win = _windows(x, kernel, stride, pad)
    y = win.astype(np.float64).sum(axis=(3, 4)) / (kh * kw)
    return y.astype(FLOAT)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0).astype(FLOAT)
