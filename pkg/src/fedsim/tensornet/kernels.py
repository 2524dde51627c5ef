"""Layer kernels with a fixed floating-point accumulation order.

Every reduction walks its index in ascending order and starts from zero;
bias terms are added after the reduction.  Inner loops may be vectorized
across *independent* outputs, which never reorders the additions feeding a
single output.  Kernels are dtype-generic so the gradient checker can run the
same code in float64.  No ``fastmath``: that would permit reassociation and
fused multiply-add contraction.
"""

from __future__ import annotations

import numba
import numpy as np

_jit = numba.njit(cache=True, nogil=True)


@_jit
def dense_forward(x, w, b):
    # x [B, K], w [K, J], b [J]
    n, k_dim = x.shape
    out = np.zeros((n, w.shape[1]), dtype=x.dtype)
    for i in range(n):
        for k in range(k_dim):
            xv = x[i, k]
            for j in range(w.shape[1]):
                out[i, j] += xv * w[k, j]
        for j in range(w.shape[1]):
            out[i, j] += b[j]
    return out


@_jit
def dense_backward(x, w, g, dw, db, need_dx):
    # Accumulates into dw [K, J] and db [J]; sums run over ascending sample index.
    n, k_dim = x.shape
    j_dim = w.shape[1]
    for i in range(n):
        for k in range(k_dim):
            xv = x[i, k]
            for j in range(j_dim):
                dw[k, j] += xv * g[i, j]
        for j in range(j_dim):
            db[j] += g[i, j]
    dx = np.zeros((n, k_dim), dtype=x.dtype)
    if need_dx:
        for i in range(n):
            for k in range(k_dim):
                acc = dx[i, k]
                for j in range(j_dim):
                    acc += g[i, j] * w[k, j]
                dx[i, k] = acc
    return dx


@_jit
def relu_forward(x):
    out = np.empty_like(x)
    flat_in = x.ravel()
    flat_out = out.ravel()
    for i in range(flat_in.shape[0]):
        v = flat_in[i]
        flat_out[i] = v if v > 0 else 0
    return out


@_jit
def relu_backward(x, g):
    out = np.empty_like(g)
    flat_x = x.ravel()
    flat_g = g.ravel()
    flat_out = out.ravel()
    for i in range(flat_x.shape[0]):
        flat_out[i] = flat_g[i] if flat_x[i] > 0 else 0
    return out


@_jit
def dropout_forward(x, uniforms, rate):
    # Keep a unit when its uniform is >= rate, i.e. with probability 1 - rate.
    out = np.empty_like(x)
    mask = np.empty_like(x)
    scale = x.dtype.type(1.0 / (1.0 - rate))
    flat_x = x.ravel()
    flat_u = uniforms.ravel()
    flat_out = out.ravel()
    flat_m = mask.ravel()
    for i in range(flat_x.shape[0]):
        m = scale if flat_u[i] >= rate else 0
        flat_m[i] = m
        flat_out[i] = flat_x[i] * m
    return out, mask


@_jit
def conv2d_forward(x, w, b):
    # x [B, C, H, W], w [O, C, KH, KW], stride 1, zero padding KH//2, KW//2.
    n, c_dim, h_dim, w_dim = x.shape
    o_dim, _, kh_dim, kw_dim = w.shape
    ph = kh_dim // 2
    pw = kw_dim // 2
    out = np.empty((n, o_dim, h_dim, w_dim), dtype=x.dtype)
    for i in range(n):
        for o in range(o_dim):
            for y in range(h_dim):
                for xx in range(w_dim):
                    acc = x.dtype.type(0)
                    for c in range(c_dim):
                        for ky in range(kh_dim):
                            sy = y + ky - ph
                            if sy < 0 or sy >= h_dim:
                                continue
                            for kx in range(kw_dim):
                                sx = xx + kx - pw
                                if sx < 0 or sx >= w_dim:
                                    continue
                                acc += x[i, c, sy, sx] * w[o, c, ky, kx]
                    out[i, o, y, xx] = acc + b[o]
    return out


@_jit
def conv2d_backward(x, w, g, dw, db, need_dx):
    n, c_dim, h_dim, w_dim = x.shape
    o_dim, _, kh_dim, kw_dim = w.shape
    ph = kh_dim // 2
    pw = kw_dim // 2
    for o in range(o_dim):
        for c in range(c_dim):
            for ky in range(kh_dim):
                for kx in range(kw_dim):
                    acc = dw[o, c, ky, kx]
                    for i in range(n):
                        for y in range(h_dim):
                            sy = y + ky - ph
                            if sy < 0 or sy >= h_dim:
                                continue
                            for xx in range(w_dim):
                                sx = xx + kx - pw
                                if sx < 0 or sx >= w_dim:
                                    continue
                                acc += x[i, c, sy, sx] * g[i, o, y, xx]
                    dw[o, c, ky, kx] = acc
        acc = db[o]
        for i in range(n):
            for y in range(h_dim):
                for xx in range(w_dim):
                    acc += g[i, o, y, xx]
        db[o] = acc
    dx = np.zeros_like(x)
    if need_dx:
        for i in range(n):
            for c in range(c_dim):
                for sy in range(h_dim):
                    for sx in range(w_dim):
                        acc = x.dtype.type(0)
                        for o in range(o_dim):
                            for ky in range(kh_dim):
                                y = sy - ky + ph
                                if y < 0 or y >= h_dim:
                                    continue
                                for kx in range(kw_dim):
                                    xx = sx - kx + pw
                                    if xx < 0 or xx >= w_dim:
                                        continue
                                    acc += g[i, o, y, xx] * w[o, c, ky, kx]
                        dx[i, c, sy, sx] = acc
    return dx


@_jit
def maxpool2_forward(x):
    # 2x2 window, stride 2, floor on odd sizes.  Ties keep the first element
    # in row-major scan order, i.e. the lowest flat index.
    n, c_dim, h_dim, w_dim = x.shape
    oh = h_dim // 2
    ow = w_dim // 2
    out = np.empty((n, c_dim, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c_dim, oh, ow), dtype=np.int64)
    for i in range(n):
        for c in range(c_dim):
            for y in range(oh):
                for xx in range(ow):
                    best = x[i, c, 2 * y, 2 * xx]
                    best_idx = (2 * y) * w_dim + 2 * xx
                    for dy in range(2):
                        for dx in range(2):
                            v = x[i, c, 2 * y + dy, 2 * xx + dx]
                            if v > best:
                                best = v
                                best_idx = (2 * y + dy) * w_dim + 2 * xx + dx
                    out[i, c, y, xx] = best
                    arg[i, c, y, xx] = best_idx
    return out, arg


@_jit
def maxpool2_backward(g, arg, in_h, in_w):
    n, c_dim, oh, ow = g.shape
    dx = np.zeros((n, c_dim, in_h, in_w), dtype=g.dtype)
    for i in range(n):
        for c in range(c_dim):
            for y in range(oh):
                for xx in range(ow):
                    idx = arg[i, c, y, xx]
                    dx[i, c, idx // in_w, idx % in_w] += g[i, c, y, xx]
    return dx


@_jit
def argmax_rows(z):
    n, k_dim = z.shape
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = 0
        for k in range(1, k_dim):
            if z[i, k] > z[i, best]:
                best = k
        out[i] = best
    return out


@_jit
def softmax_rows(z):
    n, k_dim = z.shape
    p = np.empty_like(z)
    for i in range(n):
        m = z[i, 0]
        for k in range(1, k_dim):
            if z[i, k] > m:
                m = z[i, k]
        s = z.dtype.type(0)
        for k in range(k_dim):
            e = np.exp(z[i, k] - m)
            p[i, k] = e
            s += e
        for k in range(k_dim):
            p[i, k] = p[i, k] / s
    return p


@_jit
def softmax_xent(z, labels):
    """Per-sample losses and the gradient of the batch-mean loss w.r.t. ``z``."""
    n, k_dim = z.shape
    losses = np.empty(n, dtype=z.dtype)
    grad = np.empty_like(z)
    inv_n = z.dtype.type(1.0 / n)
    for i in range(n):
        m = z[i, 0]
        for k in range(1, k_dim):
            if z[i, k] > m:
                m = z[i, k]
        s = z.dtype.type(0)
        for k in range(k_dim):
            e = np.exp(z[i, k] - m)
            grad[i, k] = e
            s += e
        losses[i] = np.log(s) + m - z[i, labels[i]]
        for k in range(k_dim):
            grad[i, k] = grad[i, k] / s
        grad[i, labels[i]] -= 1
        for k in range(k_dim):
            grad[i, k] *= inv_n
    return losses, grad


@_jit
def ordered_sum(v):
    acc = 0.0
    for i in range(v.shape[0]):
        acc += v[i]
    return acc
