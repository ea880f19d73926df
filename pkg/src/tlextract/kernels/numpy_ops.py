"""Pure-numpy reference implementations of the classifier's hot kernels.

All functions are dtype-polymorphic (float32 or float64 in, same out) and
deterministic: reductions happen in fixed axis order, and every max/argmax
resolves ties to the first position in row-major window order.  The
compiled backend in ``tlextract._core`` mirrors these semantics exactly;
these versions are the always-available fallback and the parity oracle.
"""

from __future__ import annotations

import numpy as np


def _window_view(x: np.ndarray, k: int) -> np.ndarray:
    """(C, k, k, H-k+1, W-k+1) sliding view over the last two axes."""
    c, h, w = x.shape
    s0, s1, s2 = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (c, k, k, h - k + 1, w - k + 1), (s0, s1, s2, s1, s2),
        writeable=False)


def sparse_conv_pool_forward(ys, xs, wf, bias, side, pool):
    """Fused first stage: valid convolution of a sparse binary image with
    channel-folded kernels, bias, rectifier, then max pooling.

    ys/xs are the black-pixel coordinates (unique pairs).  Returns
    (pooled, src, pre): the rectified pooled map (C, P, P), the flat
    (row * out_w + col) pre-pool position of each window's first maximum,
    and the pre-rectifier maximum used for the rectifier subgradient.
    """
    c, k, _ = wf.shape
    out = side - k + 1
    p = (out - pool) // pool + 1
    plane = np.zeros((c, out, out), dtype=wf.dtype)
    for dy in range(k):
        oy = ys - dy
        for dx in range(k):
            ox = xs - dx
            ok = (oy >= 0) & (oy < out) & (ox >= 0) & (ox < out)
            if ok.any():
                plane[:, oy[ok], ox[ok]] += wf[:, dy, dx, None]
    plane += bias[:, None, None]
    crop = plane[:, : p * pool, : p * pool]
    win = crop.reshape(c, p, pool, p, pool).transpose(0, 1, 3, 2, 4)
    win = np.ascontiguousarray(win).reshape(c, p, p, pool * pool)
    idx = win.argmax(axis=3)
    pre = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    wy, wx = idx // pool, idx % pool
    ry = np.arange(p, dtype=np.int64)[None, :, None] * pool + wy
    rx = np.arange(p, dtype=np.int64)[None, None, :] * pool + wx
    src = ry * out + rx
    return np.maximum(pre, 0), src.astype(np.int64), pre


def sparse_conv_pool_backward(grad, ys, xs, src, pre, k, side):
    """Gradients of the fused first stage w.r.t. folded kernels and bias."""
    c = grad.shape[0]
    out = side - k + 1
    bitmap = np.zeros((side, side), dtype=grad.dtype)
    bitmap[ys, xs] = 1
    gm = np.where(pre > 0, grad, 0).astype(grad.dtype)
    gb = gm.sum(axis=(1, 2))
    sy, sx = src // out, src % out
    gwf = np.empty((c, k, k), dtype=grad.dtype)
    for dy in range(k):
        for dx in range(k):
            gwf[:, dy, dx] = (gm * bitmap[sy + dy, sx + dx]).sum(axis=(1, 2))
    return gwf, gb


def conv2d_forward(x, w, b):
    """Dense valid convolution: x (Cin, H, W), w (Cout, Cin, k, k)."""
    view = _window_view(x, w.shape[2])
    y = np.tensordot(w, view, axes=([1, 2, 3], [0, 1, 2]))
    return y + b[:, None, None]


def conv2d_backward(x, w, grad):
    """Returns (grad_x, grad_w, grad_b) for conv2d_forward."""
    k = w.shape[2]
    view = _window_view(x, k)
    gb = grad.sum(axis=(1, 2))
    gw = np.tensordot(grad, view, axes=([1, 2], [3, 4]))
    cout, oh, ow = grad.shape
    gpad = np.zeros((cout, oh + 2 * (k - 1), ow + 2 * (k - 1)),
                    dtype=grad.dtype)
    gpad[:, k - 1: k - 1 + oh, k - 1: k - 1 + ow] = grad
    gview = _window_view(gpad, k)
    gx = np.tensordot(w[:, :, ::-1, ::-1], gview,
                      axes=([0, 2, 3], [0, 1, 2]))
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw), gb


def maxpool_forward(x, pool):
    """Non-overlapping max pool; trailing rows/cols that do not fill a
    window are dropped (floor division).  Returns (pooled, src) with src
    the flat pre-pool position of each window's first maximum."""
    c, h, w = x.shape
    ph, pw = (h - pool) // pool + 1, (w - pool) // pool + 1
    crop = x[:, : ph * pool, : pw * pool]
    win = crop.reshape(c, ph, pool, pw, pool).transpose(0, 1, 3, 2, 4)
    win = np.ascontiguousarray(win).reshape(c, ph, pw, pool * pool)
    idx = win.argmax(axis=3)
    pooled = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    wy, wx = idx // pool, idx % pool
    ry = np.arange(ph, dtype=np.int64)[None, :, None] * pool + wy
    rx = np.arange(pw, dtype=np.int64)[None, None, :] * pool + wx
    src = ry * w + rx
    return np.ascontiguousarray(pooled), src.astype(np.int64)


def maxpool_backward(grad, src, h, w):
    """Scatter pooled gradients back to their source positions."""
    c = grad.shape[0]
    gx = np.zeros((c, h * w), dtype=grad.dtype)
    rows = np.arange(c)[:, None]
    gx[rows, src.reshape(c, -1)] = grad.reshape(c, -1)
    return gx.reshape(c, h, w)
