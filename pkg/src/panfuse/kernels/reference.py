"""Pure-numpy kernel implementations.

This module defines the reference semantics for every hot kernel. The numba
twins in ``fast.py`` must agree with these within float32 tolerance; tests
compare the two backends directly. Unlike the fast path, everything here
accepts float64, which is what the oracle-grade checks run on.
"""

import numpy as np
from scipy.special import erf as _scipy_erf

NAME = "numpy"


def erf(x):
    return _scipy_erf(x).astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# im2col / col2im


def conv_out_size(size, k, stride, pad, dilation):
    eff = dilation * (k - 1) + 1
    return (size + 2 * pad - eff) // stride + 1


def im2col(x, kh, kw, stride, pad, dilation):
    """x: (C, H, W) -> (C*kh*kw, Ho*Wo), rows ordered (c, ki, kj)."""
    c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad, dilation)
    wo = conv_out_size(w, kw, stride, pad, dilation)
    if pad > 0:
        xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((c, kh, kw, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        ys = ki * dilation
        for kj in range(kw):
            xs = kj * dilation
            cols[:, ki, kj] = xp[:, ys:ys + ho * stride:stride,
                                 xs:xs + wo * stride:stride]
    return cols.reshape(c * kh * kw, ho * wo)


def col2im(cols, c, h, w, kh, kw, stride, pad, dilation):
    """Scatter-add inverse of im2col; returns (C, H, W)."""
    ho = conv_out_size(h, kh, stride, pad, dilation)
    wo = conv_out_size(w, kw, stride, pad, dilation)
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, ho, wo)
    for ki in range(kh):
        ys = ki * dilation
        for kj in range(kw):
            xs = kj * dilation
            xp[:, ys:ys + ho * stride:stride,
               xs:xs + wo * stride:stride] += cols[:, ki, kj]
    if pad > 0:
        return xp[:, pad:pad + h, pad:pad + w].copy()
    return xp


# ---------------------------------------------------------------------------
# depthwise convolution (stride 1), via shifted-slab accumulation


def depthwise_forward(x, w, pad, dilation):
    """x: (C, H, W), w: (C, kh, kw) -> (C, Ho, Wo)."""
    c, h, wd = x.shape
    _, kh, kw = w.shape
    ho = conv_out_size(h, kh, 1, pad, dilation)
    wo = conv_out_size(wd, kw, 1, pad, dilation)
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((c, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            ys, xs = ki * dilation, kj * dilation
            out += w[:, ki, kj, None, None] * xp[:, ys:ys + ho, xs:xs + wo]
    return out


def depthwise_backward(x, w, dout, pad, dilation):
    c, h, wd = x.shape
    _, kh, kw = w.shape
    ho, wo = dout.shape[1], dout.shape[2]
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + wd] = x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for ki in range(kh):
        for kj in range(kw):
            ys, xs = ki * dilation, kj * dilation
            patch = xp[:, ys:ys + ho, xs:xs + wo]
            dw[:, ki, kj] = (dout * patch).sum(axis=(1, 2))
            dxp[:, ys:ys + ho, xs:xs + wo] += w[:, ki, kj, None, None] * dout
    dx = dxp[:, pad:pad + h, pad:pad + wd].copy()
    return dx, dw


# ---------------------------------------------------------------------------
# bilinear upsampling (half-pixel centres, align_corners=False)


def _bilinear_grid(n_in, factor):
    src = (np.arange(n_in * factor, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_up_forward(x, factor):
    """x: (C, H, W) -> (C, factor*H, factor*W)."""
    c, h, w = x.shape
    y0, y1, fy = _bilinear_grid(h, factor)
    x0, x1, fx = _bilinear_grid(w, factor)
    fy = fy[:, None].astype(x.dtype)
    fx = fx[None, :].astype(x.dtype)
    a = x[:, y0[:, None], x0[None, :]]
    b = x[:, y0[:, None], x1[None, :]]
    cda = x[:, y1[:, None], x0[None, :]]
    d = x[:, y1[:, None], x1[None, :]]
    top = a * (1 - fx) + b * fx
    bot = cda * (1 - fx) + d * fx
    return top * (1 - fy) + bot * fy


def bilinear_up_backward(dout, c, h, w, factor):
    y0, y1, fy = _bilinear_grid(h, factor)
    x0, x1, fx = _bilinear_grid(w, factor)
    fy = fy[:, None]
    fx = fx[None, :]
    dx = np.zeros((c, h, w), dtype=np.float64)
    g = dout.astype(np.float64)
    np.add.at(dx, (slice(None), y0[:, None], x0[None, :]), g * (1 - fy) * (1 - fx))
    np.add.at(dx, (slice(None), y0[:, None], x1[None, :]), g * (1 - fy) * fx)
    np.add.at(dx, (slice(None), y1[:, None], x0[None, :]), g * fy * (1 - fx))
    np.add.at(dx, (slice(None), y1[:, None], x1[None, :]), g * fy * fx)
    return dx.astype(dout.dtype)


# ---------------------------------------------------------------------------
# scaled dot-product attention, head-batched


def attention_forward(q, k, v, scale, store_probs=False):
    """q, k, v: (heads, T, D). Returns (out, probs|None).

    Per-head score matrices are materialised one head at a time; memory is
    O(T^2) per head, which is the documented desk-scale envelope.
    """
    heads, t, d = q.shape
    out = np.empty_like(q)
    probs = np.empty((heads, t, t), dtype=q.dtype) if store_probs else None
    for hh in range(heads):
        p = _head_probs(q[hh], k[hh], scale)
        if store_probs:
            probs[hh] = p
        out[hh] = p @ v[hh]
    return out, probs


def _head_probs(qh, kh, scale):
    s = (qh @ kh.T) * qh.dtype.type(scale)
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def attention_backward(q, k, v, scale, dout, probs=None):
    heads = q.shape[0]
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    for hh in range(heads):
        p = probs[hh] if probs is not None else _head_probs(q[hh], k[hh], scale)
        dv[hh] = p.T @ dout[hh]
        dp = dout[hh] @ v[hh].T
        rowdot = (dp * p).sum(axis=1, keepdims=True)
        ds = p * (dp - rowdot)
        dq[hh] = (ds @ k[hh]) * q.dtype.type(scale)
        dk[hh] = (ds.T @ q[hh]) * q.dtype.type(scale)
    return dq, dk, dv


# ---------------------------------------------------------------------------
# k-means assignment


def kmeans_assign(feats, cents):
    """feats: (N, F), cents: (K, F), both float64.

    Returns (idx int64, d2 float64) with ties broken toward the lower
    cluster index (np.argmin semantics).
    """
    f2 = (feats * feats).sum(axis=1, keepdims=True)
    c2 = (cents * cents).sum(axis=1)
    d2 = f2 - 2.0 * (feats @ cents.T) + c2[None, :]
    idx = np.argmin(d2, axis=1)
    best = d2[np.arange(feats.shape[0]), idx]
    return idx, np.maximum(best, 0.0)


# ---------------------------------------------------------------------------
# per-cluster filter application


def cluster_filter_forward(patches, bank, idx):
    """patches: (N, P), bank: (K, P, Cout), idx: (N,) -> (N, Cout)."""
    n = patches.shape[0]
    out = np.empty((n, bank.shape[2]), dtype=patches.dtype)
    for i in range(bank.shape[0]):
        m = idx == i
        if m.any():
            out[m] = patches[m] @ bank[i]
    return out


def cluster_filter_backward(patches, bank, idx, dout):
    dpatches = np.empty_like(patches)
    dbank = np.zeros_like(bank)
    for i in range(bank.shape[0]):
        m = idx == i
        if m.any():
            dpatches[m] = dout[m] @ bank[i].T
            dbank[i] = patches[m].T @ dout[m]
    return dpatches, dbank


# ---------------------------------------------------------------------------
# segment mean (cluster centroids)


def segment_sum(x, idx, k):
    """x: (N, F), idx: (N,) -> (sums (K, F), counts (K,))."""
    sums = np.zeros((k, x.shape[1]), dtype=x.dtype)
    np.add.at(sums, idx, x)
    counts = np.bincount(idx, minlength=k).astype(np.int64)
    return sums, counts


def segment_mean_backward(dmeans, idx, counts):
    """Gradient of per-cluster mean w.r.t. members: dmean / count."""
    inv = np.zeros(counts.shape[0], dtype=dmeans.dtype)
    nz = counts > 0
    inv[nz] = 1.0 / counts[nz]
    return dmeans[idx] * inv[idx][:, None]
