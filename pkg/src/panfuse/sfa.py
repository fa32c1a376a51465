"""Spatial-frequency attention fusion producing the sharpened output.

SFA-S squeezes the stacked PAN + upsampled-MS pixel vectors through two
sigmoid-gated linear layers (pointwise), giving a spatial feature map in
(0,1)^d. SFA-F runs full spatial-token multi-head attention where the
queries come from the refined high/low frequency streams and key/value both
come from the spatial map; a shared output head (pointwise MLP + residual +
projection to the band count) maps each attended stream to image space, and
the two streams sum into the fused product.

Spatial attention is quadratic in token count; configurations with
H*W > 16384 are rejected outright rather than letting the score matrix
thrash the machine.

Ablation wiring: "no-sfa" replaces the whole module by a 3x3 conv on the
summed streams, "no-sfa-s" swaps the gated spatial map for a plain linear
embedding, "no-sfa-f" skips attention and sums per-stream projections.
"""

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAX_TOKENS = 16384

SFA_MODES = ("full", "no-sfa", "no-sfa-s", "no-sfa-f")


def _conv_p(rng, out_c, in_c, ksize, dtype, gain=1.0):
    shape = (out_c, in_c, ksize, ksize)
    return (Tensor(T.init_weight(rng, shape, dtype=dtype, gain=gain), requires_grad=True),
            Tensor(T.zeros((out_c,), dtype), requires_grad=True))


def _ln_p(d, dtype):
    return (Tensor(T.ones((d, 1, 1), dtype), requires_grad=True),
            Tensor(T.zeros((d, 1, 1), dtype), requires_grad=True))


def init_sfa_params(rng, channels, d, mode="full", dtype=np.float32):
    p = {}
    if mode == "no-sfa":
        p["bypass.w"], p["bypass.b"] = _conv_p(rng, channels, d, 3, dtype)
        return p
    if mode == "no-sfa-f":
        p["proj_h.w"], p["proj_h.b"] = _conv_p(rng, channels, d, 1, dtype)
        p["proj_l.w"], p["proj_l.b"] = _conv_p(rng, channels, d, 1, dtype)
        return p
    if mode == "no-sfa-s":
        p["embed.w"], p["embed.b"] = _conv_p(rng, d, channels + 1, 1, dtype)
    else:
        p["s1.w"], p["s1.b"] = _conv_p(rng, d, channels + 1, 1, dtype)
        p["s2.w"], p["s2.b"] = _conv_p(rng, d, d, 1, dtype)
    for q in ("q_h", "q_l"):
        p[f"{q}.ln.g"], p[f"{q}.ln.b"] = _ln_p(d, dtype)
        p[f"{q}.w"], p[f"{q}.b"] = _conv_p(rng, d, d, 1, dtype)
    p["kv.ln.g"], p["kv.ln.b"] = _ln_p(d, dtype)
    p["kv.w"], p["kv.b"] = _conv_p(rng, 2 * d, d, 1, dtype)
    p["fi.m1.w"], p["fi.m1.b"] = _conv_p(rng, d, d, 1, dtype)
    p["fi.m2.w"], p["fi.m2.b"] = _conv_p(rng, d, d, 1, dtype)
    # calm start: the two stream outputs sum, so halve the head projection
    p["fi.out.w"], p["fi.out.b"] = _conv_p(rng, channels, d, 1, dtype, gain=0.5)
    return p


# ---------------------------------------------------------------------------
# branches


def sfa_s(pan, ms_up, params, prefix):
    """Per-pixel gated spatial features in (0,1)^d.

    pan: (1, H, W); ms_up: (C, H, W); two sigmoid(linear) layers applied to
    the stacked (C+1)-vector at every pixel.
    """
    if pan.shape[1:] != ms_up.shape[1:]:
        raise T.ShapeError(
            f"sfa_s: pan {pan.shape} and ms_up {ms_up.shape} disagree spatially")
    x = T.concat([pan, ms_up], 0)
    y = T.sigmoid(T.conv2d(x, params[f"{prefix}.s1.w"], params[f"{prefix}.s1.b"]))
    return T.sigmoid(T.conv2d(y, params[f"{prefix}.s2.w"], params[f"{prefix}.s2.b"]))


def split_spatial_heads(x, heads):
    """(d, H, W) -> (heads, H*W, d/heads) spatial-token head split."""
    d, h, w = x.shape
    t = T.transpose(T.reshape(x, (d, h * w)), (1, 0))        # (N, d)
    t = T.reshape(t, (h * w, heads, d // heads))
    return T.transpose(t, (1, 0, 2))


def merge_spatial_heads(xh, d, h, w):
    t = T.transpose(xh, (1, 0, 2))                           # (N, heads, dh)
    t = T.reshape(t, (h * w, d))
    return T.reshape(T.transpose(t, (1, 0)), (d, h, w))


def _f_i(att, query_stream, params, prefix):
    """Output head: the attended tensor plus a residual from the stream that
    supplied the query, a pointwise MLP with its own residual, then
    projection to the band count."""
    y = att + query_stream
    m = T.conv2d(T.gelu(T.conv2d(y, params[f"{prefix}.fi.m1.w"],
                                 params[f"{prefix}.fi.m1.b"])),
                 params[f"{prefix}.fi.m2.w"], params[f"{prefix}.fi.m2.b"])
    return T.conv2d(y + m, params[f"{prefix}.fi.out.w"], params[f"{prefix}.fi.out.b"])


def sfa_f(h_bg, l_bg, f_s, params, prefix, heads):
    """Cross-attention fusion of the two frequency streams against the
    spatial features; returns the fused (C, H, W) output."""
    if not (h_bg.shape == l_bg.shape == f_s.shape):
        raise T.ShapeError(
            f"sfa_f: stream shapes disagree: {h_bg.shape}, {l_bg.shape}, {f_s.shape}")
    d, hh, ww = f_s.shape
    n = hh * ww
    if n == 0:
        raise T.ShapeError("sfa_f: token count 0")
    if n > MAX_TOKENS:
        raise T.ShapeError(
            f"sfa_f: {n} spatial tokens would need a {n}x{n} score matrix; "
            f"the limit is {MAX_TOKENS} (use smaller tiles)")
    if d % heads:
        raise T.ShapeError(f"sfa_f: width {d} not divisible by heads {heads}")
    scale = 1.0 / math.sqrt(d / heads)

    def q_of(x, name):
        ln = T.layer_norm(x, params[f"{prefix}.{name}.ln.g"],
                          params[f"{prefix}.{name}.ln.b"], 0)
        return T.conv2d(ln, params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"])

    kv = T.conv2d(T.layer_norm(f_s, params[f"{prefix}.kv.ln.g"],
                               params[f"{prefix}.kv.ln.b"], 0),
                  params[f"{prefix}.kv.w"], params[f"{prefix}.kv.b"])
    k = split_spatial_heads(T.slice_axis(kv, 0, 0, d), heads)
    v = split_spatial_heads(T.slice_axis(kv, 0, d, 2 * d), heads)

    outs = []
    for name, stream in (("q_h", h_bg), ("q_l", l_bg)):
        q = split_spatial_heads(q_of(stream, name), heads)
        att = merge_spatial_heads(T.scaled_attention(q, k, v, scale), d, hh, ww)
        outs.append(_f_i(att, stream, params, prefix))
    return outs[0] + outs[1]


def sfa_forward(pan, ms_up, h_bg, l_bg, params, prefix, heads, mode="full"):
    """Fusion entry point with the ablation switches."""
    if mode not in SFA_MODES:
        raise ValueError(f"unknown sfa mode {mode!r}; expected one of {SFA_MODES}")
    if mode == "no-sfa":
        summed = h_bg + l_bg
        return T.conv2d(summed, params[f"{prefix}.bypass.w"],
                        params[f"{prefix}.bypass.b"], padding=1)
    if mode == "no-sfa-f":
        o_h = T.conv2d(h_bg, params[f"{prefix}.proj_h.w"], params[f"{prefix}.proj_h.b"])
        o_l = T.conv2d(l_bg, params[f"{prefix}.proj_l.w"], params[f"{prefix}.proj_l.b"])
        return o_h + o_l
    if mode == "no-sfa-s":
        f_s = T.conv2d(T.concat([pan, ms_up], 0), params[f"{prefix}.embed.w"],
                       params[f"{prefix}.embed.b"])
    else:
        f_s = sfa_s(pan, ms_up, params, prefix)
    return sfa_f(h_bg, l_bg, f_s, params, prefix, heads)
