# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False
"""Compiled kernels for the trace-image classifier.

Drop-in replacements for :mod:`tlextract.kernels.numpy_ops` with the same
contracts: identical shapes, first-maximum tie-breaking in row-major
window order, strict-positive rectifier subgradient.  Summation order
differs from the numpy versions, so cross-backend agreement is to
floating-point tolerance, while each backend is bit-exact run to run.

The fused first stage exploits sparsity twice: contributions are
scattered only around black pixels, and pooling windows untouched by any
contribution resolve to their closed form (pre = bias, source = window
origin) without being scanned.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


def sparse_conv_pool_forward(cnp.int64_t[::1] ys, cnp.int64_t[::1] xs,
                             floating[:, :, ::1] wf, floating[::1] bias,
                             int side, int pool):
    cdef Py_ssize_t c = wf.shape[0]
    cdef int k = <int> wf.shape[1]
    cdef int out = side - k + 1
    cdef int p = (out - pool) // pool + 1
    cdef int lim = p * pool
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    plane_arr = np.zeros((c, out, out), dtype=dtype)
    dirty_arr = np.zeros((p, p), dtype=np.uint8)
    pooled_arr = np.empty((c, p, p), dtype=dtype)
    src_arr = np.empty((c, p, p), dtype=np.int64)
    pre_arr = np.empty((c, p, p), dtype=dtype)
    cdef floating[:, :, ::1] plane = plane_arr
    cdef cnp.uint8_t[:, ::1] dirty = dirty_arr
    cdef floating[:, :, ::1] pooled = pooled_arr
    cdef cnp.int64_t[:, :, ::1] src = src_arr
    cdef floating[:, :, ::1] pre = pre_arr
    cdef Py_ssize_t n = ys.shape[0]
    cdef Py_ssize_t i
    cdef int y, x, oy, ox, dy, dx, ci, wy, wx
    cdef int ylo, yhi, xlo, xhi, wi, wj, row, col, bi, bj
    cdef floating v, best, b

    for i in range(n):
        y = <int> ys[i]
        x = <int> xs[i]
        for dy in range(k):
            oy = y - dy
            if oy < 0 or oy >= out:
                continue
            for dx in range(k):
                ox = x - dx
                if ox < 0 or ox >= out:
                    continue
                for ci in range(c):
                    plane[ci, oy, ox] += wf[ci, dy, dx]
        # Mark every pooling window this pixel's support can reach.
        ylo = y - k + 1
        if ylo < 0:
            ylo = 0
        yhi = y if y < lim - 1 else lim - 1
        xlo = x - k + 1
        if xlo < 0:
            xlo = 0
        xhi = x if x < lim - 1 else lim - 1
        for wi in range(ylo // pool, yhi // pool + 1):
            for wj in range(xlo // pool, xhi // pool + 1):
                dirty[wi, wj] = 1

    for ci in range(c):
        b = bias[ci]
        for wi in range(p):
            for wj in range(p):
                if dirty[wi, wj]:
                    best = plane[ci, wi * pool, wj * pool]
                    bi = wi * pool
                    bj = wj * pool
                    for wy in range(pool):
                        row = wi * pool + wy
                        for wx in range(pool):
                            col = wj * pool + wx
                            v = plane[ci, row, col]
                            if v > best:
                                best = v
                                bi = row
                                bj = col
                    v = best + b
                else:
                    v = b
                    bi = wi * pool
                    bj = wj * pool
                pre[ci, wi, wj] = v
                pooled[ci, wi, wj] = v if v > 0 else 0
                src[ci, wi, wj] = (<cnp.int64_t> bi) * out + bj
    return pooled_arr, src_arr, pre_arr


def sparse_conv_pool_backward(floating[:, :, ::1] grad,
                              cnp.int64_t[::1] ys, cnp.int64_t[::1] xs,
                              cnp.int64_t[:, :, ::1] src,
                              floating[:, :, ::1] pre, int k, int side):
    cdef Py_ssize_t c = grad.shape[0]
    cdef Py_ssize_t p = grad.shape[1]
    cdef int out = side - k + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    bitmap_arr = np.zeros(side * side, dtype=np.uint8)
    gwf_arr = np.zeros((c, k, k), dtype=dtype)
    gb_arr = np.zeros(c, dtype=dtype)
    cdef cnp.uint8_t[::1] bitmap = bitmap_arr
    cdef floating[:, :, ::1] gwf = gwf_arr
    cdef floating[::1] gb = gb_arr
    cdef Py_ssize_t n = ys.shape[0]
    cdef Py_ssize_t i
    cdef int ci, wi, wj, dy, dx, sy, sx, base
    cdef cnp.int64_t s
    cdef floating g

    for i in range(n):
        bitmap[ys[i] * side + xs[i]] = 1
    for ci in range(c):
        for wi in range(p):
            for wj in range(p):
                if pre[ci, wi, wj] <= 0:
                    continue
                g = grad[ci, wi, wj]
                gb[ci] += g
                s = src[ci, wi, wj]
                sy = <int> (s // out)
                sx = <int> (s % out)
                for dy in range(k):
                    base = (sy + dy) * side + sx
                    for dx in range(k):
                        if bitmap[base + dx]:
                            gwf[ci, dy, dx] += g
    return gwf_arr, gb_arr


def conv2d_forward(floating[:, :, ::1] x, floating[:, :, :, ::1] w,
                   floating[::1] b):
    cdef Py_ssize_t cin = x.shape[0]
    cdef Py_ssize_t h = x.shape[1]
    cdef Py_ssize_t wdt = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0]
    cdef int k = <int> w.shape[2]
    cdef Py_ssize_t oh = h - k + 1
    cdef Py_ssize_t ow = wdt - k + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y_arr = np.empty((cout, oh, ow), dtype=dtype)
    cdef floating[:, :, ::1] y = y_arr
    cdef Py_ssize_t co, ci, oy, ox
    cdef int dy, dx
    cdef floating wv

    for co in range(cout):
        for oy in range(oh):
            for ox in range(ow):
                y[co, oy, ox] = b[co]
        for ci in range(cin):
            for dy in range(k):
                for dx in range(k):
                    wv = w[co, ci, dy, dx]
                    for oy in range(oh):
                        for ox in range(ow):
                            y[co, oy, ox] += wv * x[ci, oy + dy, ox + dx]
    return y_arr


def conv2d_backward(floating[:, :, ::1] x, floating[:, :, :, ::1] w,
                    floating[:, :, ::1] grad):
    cdef Py_ssize_t cin = x.shape[0]
    cdef Py_ssize_t h = x.shape[1]
    cdef Py_ssize_t wdt = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0]
    cdef int k = <int> w.shape[2]
    cdef Py_ssize_t oh = grad.shape[1]
    cdef Py_ssize_t ow = grad.shape[2]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx_arr = np.zeros((cin, h, wdt), dtype=dtype)
    gw_arr = np.empty((cout, cin, k, k), dtype=dtype)
    gb_arr = np.zeros(cout, dtype=dtype)
    cdef floating[:, :, ::1] gx = gx_arr
    cdef floating[:, :, :, ::1] gw = gw_arr
    cdef floating[::1] gb = gb_arr
    cdef Py_ssize_t co, ci, oy, ox
    cdef int dy, dx
    cdef floating acc, g, wv

    for co in range(cout):
        acc = 0
        for oy in range(oh):
            for ox in range(ow):
                acc += grad[co, oy, ox]
        gb[co] = acc
        for ci in range(cin):
            for dy in range(k):
                for dx in range(k):
                    acc = 0
                    for oy in range(oh):
                        for ox in range(ow):
                            acc += grad[co, oy, ox] * x[ci, oy + dy, ox + dx]
                    gw[co, ci, dy, dx] = acc
            for oy in range(oh):
                for ox in range(ow):
                    g = grad[co, oy, ox]
                    if g == 0:
                        continue
                    for dy in range(k):
                        for dx in range(k):
                            gx[ci, oy + dy, ox + dx] += w[co, ci, dy, dx] * g
    return gx_arr, gw_arr, gb_arr


def maxpool_forward(floating[:, :, ::1] x, int pool):
    cdef Py_ssize_t c = x.shape[0]
    cdef Py_ssize_t h = x.shape[1]
    cdef Py_ssize_t w = x.shape[2]
    cdef Py_ssize_t ph = (h - pool) // pool + 1
    cdef Py_ssize_t pw = (w - pool) // pool + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    pooled_arr = np.empty((c, ph, pw), dtype=dtype)
    src_arr = np.empty((c, ph, pw), dtype=np.int64)
    cdef floating[:, :, ::1] pooled = pooled_arr
    cdef cnp.int64_t[:, :, ::1] src = src_arr
    cdef Py_ssize_t ci, wi, wj, row, col, bi, bj
    cdef int wy, wx
    cdef floating v, best

    for ci in range(c):
        for wi in range(ph):
            for wj in range(pw):
                best = x[ci, wi * pool, wj * pool]
                bi = wi * pool
                bj = wj * pool
                for wy in range(pool):
                    row = wi * pool + wy
                    for wx in range(pool):
                        col = wj * pool + wx
                        v = x[ci, row, col]
                        if v > best:
                            best = v
                            bi = row
                            bj = col
                pooled[ci, wi, wj] = best
                src[ci, wi, wj] = (<cnp.int64_t> bi) * w + bj
    return pooled_arr, src_arr


def maxpool_backward(floating[:, :, ::1] grad, cnp.int64_t[:, :, ::1] src,
                     int h, int w):
    cdef Py_ssize_t c = grad.shape[0]
    cdef Py_ssize_t ph = grad.shape[1]
    cdef Py_ssize_t pw = grad.shape[2]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gx_arr = np.zeros((c, h, w), dtype=dtype)
    cdef floating[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t ci, wi, wj
    cdef cnp.int64_t s

    for ci in range(c):
        for wi in range(ph):
            for wj in range(pw):
                s = src[ci, wi, wj]
                gx[ci, s // w, s % w] = grad[ci, wi, wj]
    return gx_arr
