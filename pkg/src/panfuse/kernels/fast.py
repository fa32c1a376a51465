"""Numba-accelerated kernel twins.

Only the kernels that dominate runtime get @njit versions: patch gather and
scatter (im2col/col2im), the fused token attention, k-means assignment, the
per-cluster filter apply, and bilinear resampling. Everything else is fast
enough as vectorised numpy and is re-exported from ``reference``.

The attention kernels never materialise the full (T, T) score matrix unless
probability storage is requested; rows live in L1-resident scratch buffers.
exp() inside the attention inner loop is an exp2 polynomial with the usual
IEEE exponent-assembly trick (relative error ~2e-8, well under float32 eps),
written so LLVM can keep the loop branch-free and vectorised.
"""

import numpy as np
from numba import njit

from .reference import (  # noqa: F401  (re-exported, same semantics)
    conv_out_size,
    erf,
    segment_mean_backward,
)

NAME = "numba"

# exp2(t) on [-0.5, 0.5]; fitted minimax-style, max relative error 4.4e-9
_E0 = np.float32(1.0000000004e+00)
_E1 = np.float32(6.9314719921e-01)
_E2 = np.float32(2.4022647364e-01)
_E3 = np.float32(5.5503422722e-02)
_E4 = np.float32(9.6184910712e-03)
_E5 = np.float32(1.3394706616e-03)
_E6 = np.float32(1.5332501309e-04)
_LOG2E = 1.4426950408889634


# ---------------------------------------------------------------------------
# im2col / col2im


@njit(cache=True)
def _im2col(x, kh, kw, stride, pad, dilation, out, ho, wo):
    c, h, w = x.shape
    for ci in range(c):
        for ki in range(kh):
            iy_off = ki * dilation - pad
            for kj in range(kw):
                ix_off = kj * dilation - pad
                r = (ci * kh + ki) * kw + kj
                # valid ox range so that 0 <= ox*stride + ix_off < w
                ox_lo = 0
                if ix_off < 0:
                    ox_lo = (-ix_off + stride - 1) // stride
                ox_hi = wo
                lim = w - ix_off
                if lim < ox_hi * stride:
                    ox_hi = (lim + stride - 1) // stride
                    if ox_hi < 0:
                        ox_hi = 0
                for oy in range(ho):
                    iy = oy * stride + iy_off
                    if iy < 0 or iy >= h:
                        continue
                    base = oy * wo
                    for ox in range(ox_lo, ox_hi):
                        out[r, base + ox] = x[ci, iy, ox * stride + ix_off]


def im2col(x, kh, kw, stride, pad, dilation):
    c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad, dilation)
    wo = conv_out_size(w, kw, stride, pad, dilation)
    out = np.zeros((c * kh * kw, ho * wo), dtype=x.dtype)
    _im2col(x, kh, kw, stride, pad, dilation, out, ho, wo)
    return out


@njit(cache=True)
def _col2im(cols, xp, kh, kw, stride, pad, dilation, ho, wo, h, w):
    c = xp.shape[0]
    for ci in range(c):
        for ki in range(kh):
            for kj in range(kw):
                r = (ci * kh + ki) * kw + kj
                iy_off = ki * dilation
                ix_off = kj * dilation
                for oy in range(ho):
                    iy = oy * stride + iy_off
                    base = oy * wo
                    for ox in range(wo):
                        xp[ci, iy, ox * stride + ix_off] += cols[r, base + ox]


def col2im(cols, c, h, w, kh, kw, stride, pad, dilation):
    ho = conv_out_size(h, kh, stride, pad, dilation)
    wo = conv_out_size(w, kw, stride, pad, dilation)
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    _col2im(np.ascontiguousarray(cols), xp, kh, kw, stride, pad, dilation,
            ho, wo, h, w)
    if pad > 0:
        return xp[:, pad:pad + h, pad:pad + w].copy()
    return xp


# ---------------------------------------------------------------------------
# depthwise convolution (stride 1)


@njit(cache=True, fastmath=True, boundscheck=False)
def _dw_fwd(x, w, pad, dil, out):
    c, h, wd = x.shape
    kh, kw = w.shape[1], w.shape[2]
    ho, wo = out.shape[1], out.shape[2]
    for ci in range(c):
        for ki in range(kh):
            iy_off = ki * dil - pad
            for kj in range(kw):
                ix_off = kj * dil - pad
                wgt = w[ci, ki, kj]
                ox_lo = max(0, -ix_off)
                ox_hi = min(wo, wd - ix_off)
                for oy in range(ho):
                    iy = oy + iy_off
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(ox_lo, ox_hi):
                        out[ci, oy, ox] += wgt * x[ci, iy, ox + ix_off]


def depthwise_forward(x, w, pad, dilation):
    c, h, wd = x.shape
    kh, kw = w.shape[1], w.shape[2]
    ho = conv_out_size(h, kh, 1, pad, dilation)
    wo = conv_out_size(wd, kw, 1, pad, dilation)
    out = np.zeros((c, ho, wo), dtype=x.dtype)
    _dw_fwd(x, w, pad, dilation, out)
    return out


@njit(cache=True, fastmath=True, boundscheck=False)
def _dw_bwd(x, w, dout, pad, dil, dx, dw):
    c, h, wd = x.shape
    kh, kw = w.shape[1], w.shape[2]
    ho, wo = dout.shape[1], dout.shape[2]
    for ci in range(c):
        for ki in range(kh):
            iy_off = ki * dil - pad
            for kj in range(kw):
                ix_off = kj * dil - pad
                wgt = w[ci, ki, kj]
                acc = x.dtype.type(0.0)
                ox_lo = max(0, -ix_off)
                ox_hi = min(wo, wd - ix_off)
                for oy in range(ho):
                    iy = oy + iy_off
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(ox_lo, ox_hi):
                        g = dout[ci, oy, ox]
                        acc += g * x[ci, iy, ox + ix_off]
                        dx[ci, iy, ox + ix_off] += wgt * g
                dw[ci, ki, kj] += acc


def depthwise_backward(x, w, dout, pad, dilation):
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    _dw_bwd(x, w, np.ascontiguousarray(dout), pad, dilation, dx, dw)
    return dx, dw


# ---------------------------------------------------------------------------
# fused attention


@njit(fastmath=True, cache=True, boundscheck=False)
def _attn_rows(q, k, v, scale, out, probs, store):
    # q, k, v, out: (heads, D, T) float32 SoA; probs: (heads, T, T) when store
    heads, d, t = q.shape
    c = np.float32(scale * _LOG2E)
    srow = np.empty(t, dtype=np.float32)
    prow = np.empty(t, dtype=np.float32)
    ibuf = np.empty(t, dtype=np.int32)
    ebuf = ibuf.view(np.float32)
    macc = np.empty(16, dtype=np.float32)
    for h in range(heads):
        for i in range(t):
            q0 = q[h, 0, i] * c
            for j in range(t):
                srow[j] = q0 * k[h, 0, j]
            for dd in range(1, d):
                qd = q[h, dd, i] * c
                for j in range(t):
                    srow[j] += qd * k[h, dd, j]
            m = _row_max(srow, macc, t)
            _row_exp(srow, prow, ibuf, m, t)
            z = np.float32(0.0)
            for j in range(t):
                e = prow[j] * ebuf[j]
                srow[j] = e
                z += e
            inv = np.float32(1.0) / z
            for dd in range(d):
                acc = np.float32(0.0)
                for j in range(t):
                    acc += srow[j] * v[h, dd, j]
                out[h, dd, i] = acc * inv
            if store:
                for j in range(t):
                    probs[h, i, j] = srow[j] * inv
    return out


@njit(fastmath=True, cache=True, boundscheck=False)
def _attn_bwd(q, k, v, scale, dout, probs, have_probs, dq, dk, dv):
    heads, d, t = q.shape
    c = np.float32(scale * _LOG2E)
    sscale = np.float32(scale)
    srow = np.empty(t, dtype=np.float32)
    prow = np.empty(t, dtype=np.float32)
    dprow = np.empty(t, dtype=np.float32)
    ibuf = np.empty(t, dtype=np.int32)
    ebuf = ibuf.view(np.float32)
    macc = np.empty(16, dtype=np.float32)
    for h in range(heads):
        for i in range(t):
            if have_probs:
                for j in range(t):
                    srow[j] = probs[h, i, j]
            else:
                q0 = q[h, 0, i] * c
                for j in range(t):
                    srow[j] = q0 * k[h, 0, j]
                for dd in range(1, d):
                    qd = q[h, dd, i] * c
                    for j in range(t):
                        srow[j] += qd * k[h, dd, j]
                m = _row_max(srow, macc, t)
                _row_exp(srow, prow, ibuf, m, t)
                z = np.float32(0.0)
                for j in range(t):
                    e = prow[j] * ebuf[j]
                    srow[j] = e
                    z += e
                inv = np.float32(1.0) / z
                for j in range(t):
                    srow[j] *= inv
            # srow now holds the probability row
            for j in range(t):
                dprow[j] = np.float32(0.0)
            for dd in range(d):
                g = dout[h, dd, i]
                for j in range(t):
                    dv[h, dd, j] += srow[j] * g
                    dprow[j] += g * v[h, dd, j]
            rowdot = np.float32(0.0)
            for j in range(t):
                rowdot += srow[j] * dprow[j]
            for j in range(t):
                srow[j] = srow[j] * (dprow[j] - rowdot) * sscale
            for dd in range(d):
                acc = np.float32(0.0)
                qd = q[h, dd, i]
                for j in range(t):
                    acc += srow[j] * k[h, dd, j]
                    dk[h, dd, j] += srow[j] * qd
                dq[h, dd, i] = acc


@njit(fastmath=True, cache=True, boundscheck=False, inline="always")
def _row_scores_hd2(k0, k1, q0, q1, srow, t):
    for j in range(t):
        srow[j] = q0 * k0[j] + q1 * k1[j]


@njit(fastmath=True, cache=True, boundscheck=False, inline="always")
def _row_max(srow, acc, t):
    # 16-lane accumulators; a plain max-reduce loop does not vectorise
    for l in range(16):
        acc[l] = np.float32(-3.0e38)
    j = 0
    while j + 16 <= t:
        for l in range(16):
            acc[l] = max(acc[l], srow[j + l])
        j += 16
    m = acc[0]
    for l in range(1, 16):
        m = max(m, acc[l])
    while j < t:
        m = max(m, srow[j])
        j += 1
    return m


@njit(fastmath=True, cache=True, boundscheck=False, inline="always")
def _row_exp(srow, prow, ibuf, m, t):
    for j in range(t):
        x = srow[j] - m
        x = max(x, np.float32(-126.0))
        ni = np.int32(x - np.float32(0.5))
        tt = x - np.float32(ni)
        p = _E0 + tt * (_E1 + tt * (_E2 + tt * (_E3 + tt * (_E4 + tt * (_E5 + tt * _E6)))))
        ibuf[j] = (ni + np.int32(127)) << 23
        prow[j] = p


@njit(fastmath=True, cache=True, boundscheck=False)
def _attn_fwd_hd2(q, k, v, out, mz):
    # hd=2 forward, scale/log2 folded into q by the caller; per-row max and
    # normaliser land in mz so backward can skip recomputing them
    heads, d, t = q.shape
    srow = np.empty(t, dtype=np.float32)
    prow = np.empty(t, dtype=np.float32)
    ibuf = np.empty(t, dtype=np.int32)
    ebuf = ibuf.view(np.float32)
    macc = np.empty(16, dtype=np.float32)
    for h in range(heads):
        k0 = k[h, 0]
        k1 = k[h, 1]
        v0 = v[h, 0]
        v1 = v[h, 1]
        for i in range(t):
            _row_scores_hd2(k0, k1, q[h, 0, i], q[h, 1, i], srow, t)
            m = _row_max(srow, macc, t)
            _row_exp(srow, prow, ibuf, m, t)
            z = np.float32(0.0)
            a0 = np.float32(0.0)
            a1 = np.float32(0.0)
            for j in range(t):
                e = prow[j] * ebuf[j]
                z += e
                a0 += e * v0[j]
                a1 += e * v1[j]
            inv = np.float32(1.0) / z
            out[h, 0, i] = a0 * inv
            out[h, 1, i] = a1 * inv
            mz[h, 0, i] = m
            mz[h, 1, i] = inv


@njit(fastmath=True, cache=True, boundscheck=False)
def _attn_bwd_hd2(q, k, v, dout, mz, have_mz, dq, dk, dv):
    # hd=2 backward; probabilities recomputed from scores, reusing the
    # forward's per-row max and normaliser when provided
    heads, d, t = q.shape
    srow = np.empty(t, dtype=np.float32)
    prow = np.empty(t, dtype=np.float32)
    dprow = np.empty(t, dtype=np.float32)
    ibuf = np.empty(t, dtype=np.int32)
    ebuf = ibuf.view(np.float32)
    macc = np.empty(16, dtype=np.float32)
    for h in range(heads):
        k0 = k[h, 0]
        k1 = k[h, 1]
        v0 = v[h, 0]
        v1 = v[h, 1]
        dv0 = dv[h, 0]
        dv1 = dv[h, 1]
        dk0 = dk[h, 0]
        dk1 = dk[h, 1]
        for i in range(t):
            q0 = q[h, 0, i]
            q1 = q[h, 1, i]
            _row_scores_hd2(k0, k1, q0, q1, srow, t)
            if have_mz:
                m = mz[h, 0, i]
                inv = mz[h, 1, i]
                _row_exp(srow, prow, ibuf, m, t)
                for j in range(t):
                    srow[j] = prow[j] * ebuf[j]
            else:
                m = _row_max(srow, macc, t)
                _row_exp(srow, prow, ibuf, m, t)
                z = np.float32(0.0)
                for j in range(t):
                    e = prow[j] * ebuf[j]
                    srow[j] = e
                    z += e
                inv = np.float32(1.0) / z
            g0 = dout[h, 0, i]
            g1 = dout[h, 1, i]
            c0 = g0 * inv
            c1 = g1 * inv
            rd = np.float32(0.0)
            for j in range(t):
                e = srow[j]
                dp = g0 * v0[j] + g1 * v1[j]
                dprow[j] = dp
                dv0[j] += e * c0
                dv1[j] += e * c1
                rd += e * dp
            rd *= inv
            dq0 = np.float32(0.0)
            dq1 = np.float32(0.0)
            for j in range(t):
                ds = (srow[j] * inv) * (dprow[j] - rd)
                dq0 += ds * k0[j]
                dq1 += ds * k1[j]
                dk0[j] += ds * q0
                dk1[j] += ds * q1
            dq[h, 0, i] = dq0
            dq[h, 1, i] = dq1


def attention_forward(q, k, v, scale, store_probs=False):
    """Same contract as reference.attention_forward; float32 only."""
    heads, t, d = q.shape
    ks = np.ascontiguousarray(k.transpose(0, 2, 1))
    vs = np.ascontiguousarray(v.transpose(0, 2, 1))
    out = np.empty((heads, d, t), dtype=np.float32)
    if d == 2 and not store_probs:
        # fold scale and the exp2 base change into q: softmax_e(scale*s)
        # == softmax_2(scale*log2(e)*s), so the hot kernel runs factor-free
        qs = np.ascontiguousarray((q * np.float32(scale * _LOG2E)).transpose(0, 2, 1))
        mz = np.empty((heads, 2, t), dtype=np.float32)
        _attn_fwd_hd2(qs, ks, vs, out, mz)
        return np.ascontiguousarray(out.transpose(0, 2, 1)), ("mz", mz)
    qs = np.ascontiguousarray(q.transpose(0, 2, 1))
    if store_probs:
        probs = np.empty((heads, t, t), dtype=np.float32)
        _attn_rows(qs, ks, vs, float(scale), out, probs, True)
    else:
        probs = None
        dummy = np.empty((1, 1, 1), dtype=np.float32)
        _attn_rows(qs, ks, vs, float(scale), out, dummy, False)
    return np.ascontiguousarray(out.transpose(0, 2, 1)), probs


def attention_backward(q, k, v, scale, dout, probs=None):
    heads, t, d = q.shape
    ks = np.ascontiguousarray(k.transpose(0, 2, 1))
    vs = np.ascontiguousarray(v.transpose(0, 2, 1))
    dos = np.ascontiguousarray(dout.transpose(0, 2, 1))
    mz = None
    if isinstance(probs, tuple) and probs[0] == "mz":
        mz = probs[1]
        probs = None
    if d == 2 and probs is None:
        # kernel sees q~ = scale*log2(e)*q and emits dS@k and dS^T@q~;
        # true dq = scale*(dS@k), true dk = scale*(dS^T@q) = kernel_dk/log2(e)
        qs = np.ascontiguousarray((q * np.float32(scale * _LOG2E)).transpose(0, 2, 1))
        dq = np.empty_like(qs)
        dk = np.zeros_like(ks)
        dv = np.zeros_like(vs)
        if mz is None:
            dummy = np.empty((1, 1, 1), dtype=np.float32)
            _attn_bwd_hd2(qs, ks, vs, dos, dummy, False, dq, dk, dv)
        else:
            _attn_bwd_hd2(qs, ks, vs, dos, mz, True, dq, dk, dv)
        return (np.ascontiguousarray(dq.transpose(0, 2, 1)) * np.float32(scale),
                np.ascontiguousarray(dk.transpose(0, 2, 1)) * np.float32(1.0 / _LOG2E),
                np.ascontiguousarray(dv.transpose(0, 2, 1)))
    qs = np.ascontiguousarray(q.transpose(0, 2, 1))
    dq = np.empty_like(qs)
    dk = np.zeros_like(ks)
    dv = np.zeros_like(vs)
    if probs is None:
        dummy = np.empty((1, 1, 1), dtype=np.float32)
        _attn_bwd(qs, ks, vs, float(scale), dos, dummy, False, dq, dk, dv)
    else:
        _attn_bwd(qs, ks, vs, float(scale), dos, probs, True, dq, dk, dv)
    return (np.ascontiguousarray(dq.transpose(0, 2, 1)),
            np.ascontiguousarray(dk.transpose(0, 2, 1)),
            np.ascontiguousarray(dv.transpose(0, 2, 1)))


# ---------------------------------------------------------------------------
# k-means assignment


@njit(cache=True)
def _assign(feats, cents, idx, best):
    n, f = feats.shape
    k = cents.shape[0]
    for i in range(n):
        bd = np.inf
        bi = 0
        for c in range(k):
            d = 0.0
            for j in range(f):
                t = feats[i, j] - cents[c, j]
                d += t * t
            if d < bd:
                bd = d
                bi = c
        idx[i] = bi
        best[i] = bd


def kmeans_assign(feats, cents):
    idx = np.empty(feats.shape[0], dtype=np.int64)
    best = np.empty(feats.shape[0], dtype=np.float64)
    _assign(np.ascontiguousarray(feats), np.ascontiguousarray(cents), idx, best)
    return idx, best


# ---------------------------------------------------------------------------
# per-cluster filter apply


@njit(cache=True, fastmath=True)
def _cf_fwd(patches, bank, idx, out):
    n, p = patches.shape
    cout = bank.shape[2]
    for i in range(n):
        b = idx[i]
        for co in range(cout):
            acc = patches.dtype.type(0.0)
            for pp in range(p):
                acc += patches[i, pp] * bank[b, pp, co]
            out[i, co] = acc


def cluster_filter_forward(patches, bank, idx):
    out = np.empty((patches.shape[0], bank.shape[2]), dtype=patches.dtype)
    _cf_fwd(patches, bank, idx, out)
    return out


@njit(cache=True, fastmath=True)
def _cf_bwd(patches, bank, idx, dout, dpatches, dbank):
    n, p = patches.shape
    cout = bank.shape[2]
    for i in range(n):
        b = idx[i]
        for pp in range(p):
            acc = patches.dtype.type(0.0)
            for co in range(cout):
                g = dout[i, co]
                acc += g * bank[b, pp, co]
                dbank[b, pp, co] += patches[i, pp] * g
            dpatches[i, pp] = acc


def cluster_filter_backward(patches, bank, idx, dout):
    dpatches = np.empty_like(patches)
    dbank = np.zeros_like(bank)
    _cf_bwd(patches, bank, idx, np.ascontiguousarray(dout), dpatches, dbank)
    return dpatches, dbank


# ---------------------------------------------------------------------------
# segment sum


@njit(cache=True)
def _seg_sum(x, idx, sums, counts):
    n, f = x.shape
    for i in range(n):
        b = idx[i]
        counts[b] += 1
        for j in range(f):
            sums[b, j] += x[i, j]


def segment_sum(x, idx, k):
    sums = np.zeros((k, x.shape[1]), dtype=x.dtype)
    counts = np.zeros(k, dtype=np.int64)
    _seg_sum(np.ascontiguousarray(x), idx, sums, counts)
    return sums, counts


# ---------------------------------------------------------------------------
# bilinear upsampling


@njit(cache=True)
def _bilinear_fwd(x, y0, y1, fy, x0, x1, fx, out):
    c, oh, ow = out.shape
    for ci in range(c):
        for oy in range(oh):
            a0, a1, wy = y0[oy], y1[oy], fy[oy]
            for ox in range(ow):
                b0, b1, wx = x0[ox], x1[ox], fx[ox]
                top = x[ci, a0, b0] * (1 - wx) + x[ci, a0, b1] * wx
                bot = x[ci, a1, b0] * (1 - wx) + x[ci, a1, b1] * wx
                out[ci, oy, ox] = top * (1 - wy) + bot * wy


def bilinear_up_forward(x, factor):
    from .reference import _bilinear_grid
    c, h, w = x.shape
    y0, y1, fy = _bilinear_grid(h, factor)
    x0, x1, fx = _bilinear_grid(w, factor)
    out = np.empty((c, h * factor, w * factor), dtype=x.dtype)
    _bilinear_fwd(x, y0, y1, fy.astype(x.dtype), x0, x1, fx.astype(x.dtype), out)
    return out


@njit(cache=True)
def _bilinear_bwd(dout, y0, y1, fy, x0, x1, fx, dx):
    c, oh, ow = dout.shape
    for ci in range(c):
        for oy in range(oh):
            a0, a1, wy = y0[oy], y1[oy], fy[oy]
            for ox in range(ow):
                b0, b1, wx = x0[ox], x1[ox], fx[ox]
                g = dout[ci, oy, ox]
                dx[ci, a0, b0] += g * (1 - wy) * (1 - wx)
                dx[ci, a0, b1] += g * (1 - wy) * wx
                dx[ci, a1, b0] += g * wy * (1 - wx)
                dx[ci, a1, b1] += g * wy * wx


def bilinear_up_backward(dout, c, h, w, factor):
    from .reference import _bilinear_grid
    y0, y1, fy = _bilinear_grid(h, factor)
    x0, x1, fx = _bilinear_grid(w, factor)
    dx = np.zeros((c, h, w), dtype=dout.dtype)
    _bilinear_bwd(np.ascontiguousarray(dout), y0, y1, fy.astype(dout.dtype),
                  x0, x1, fx.astype(dout.dtype), dx)
    return dx
