"""Dual-stream refinement of the separated frequency components.

Each stream first passes a per-branch noise calibration block (NCB): a small
conv stack estimates a noise map, the map is fused back with the features,
and spatial (dilated convs) and channel (squeeze-excitation) sigmoid gates
reweight the fused features. Two cascaded stages of mutual-guidance
cross-attention (MGB) and gated feedforward (FGB) then refine the pair;
stage parameters are independent, while within a stage the q/k/v mappings,
output projection, and FGB weights are shared between the two streams.

Residual output projections (MGB out conv, FGB map conv) initialise to
zero, so a freshly built DSR is an exact pass-through of its NCB outputs.
"""

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


def _conv_p(rng, out_c, in_c, ksize, dtype, zero=False, gain=1.0):
    shape = (out_c, in_c, ksize, ksize)
    w = T.zeros(shape, dtype) if zero else T.init_weight(rng, shape, dtype=dtype, gain=gain)
    return Tensor(w, requires_grad=True), Tensor(T.zeros((out_c,), dtype), requires_grad=True)


def _dw_p(rng, c, ksize, dtype):
    w = T.init_weight(rng, (c, ksize, ksize), dtype=dtype)
    return Tensor(w, requires_grad=True), Tensor(T.zeros((c,), dtype), requires_grad=True)


def _ln_p(d, dtype):
    return (Tensor(T.ones((d, 1, 1), dtype), requires_grad=True),
            Tensor(T.zeros((d, 1, 1), dtype), requires_grad=True))


_RELU_GAIN = math.sqrt(2.0)


def init_ncb_params(rng, d, dtype=np.float32):
    p = {}
    for i in (1, 2, 3):
        gain = _RELU_GAIN if i < 3 else 1.0  # first two feed ReLUs
        p[f"est{i}.w"], p[f"est{i}.b"] = _conv_p(rng, d, d, 3, dtype, gain=gain)
    p["fuse.w"], p["fuse.b"] = _conv_p(rng, d, 2 * d, 3, dtype)
    p["sp1.w"], p["sp1.b"] = _conv_p(rng, d, d, 3, dtype, gain=_RELU_GAIN)
    p["sp2.w"], p["sp2.b"] = _conv_p(rng, 1, d, 3, dtype)
    dr = max(1, d // 4)
    p["ch1.w"], p["ch1.b"] = _conv_p(rng, dr, d, 1, dtype, gain=_RELU_GAIN)
    p["ch2.w"], p["ch2.b"] = _conv_p(rng, d, dr, 1, dtype)
    p["out.w"], p["out.b"] = _conv_p(rng, d, 2 * d, 3, dtype)
    return p


def init_mgb_params(rng, d, dtype=np.float32):
    p = {}
    p["ln_h.g"], p["ln_h.b"] = _ln_p(d, dtype)
    p["ln_l.g"], p["ln_l.b"] = _ln_p(d, dtype)
    for f in ("q", "k", "v"):
        p[f"{f}.pw.w"], p[f"{f}.pw.b"] = _conv_p(rng, d, d, 1, dtype)
        p[f"{f}.dw.w"], p[f"{f}.dw.b"] = _dw_p(rng, d, 3, dtype)
    p["out.w"], p["out.b"] = _conv_p(rng, d, d, 1, dtype, zero=True)
    return p


def init_fgb_params(rng, d, dtype=np.float32):
    p = {}
    p["ln.g"], p["ln.b"] = _ln_p(d, dtype)
    for br in ("a", "b"):
        p[f"{br}.pw.w"], p[f"{br}.pw.b"] = _conv_p(rng, 2 * d, d, 1, dtype)
        p[f"{br}.dw.w"], p[f"{br}.dw.b"] = _dw_p(rng, 2 * d, 3, dtype)
    p["map.w"], p["map.b"] = _conv_p(rng, d, 2 * d, 1, dtype, zero=True)
    return p


def init_dsr_params(rng, d, stages, dtype=np.float32):
    params = {}
    for branch in ("high", "low"):
        for name, t in init_ncb_params(rng, d, dtype).items():
            params[f"ncb_{branch}.{name}"] = t
    for s in range(stages):
        for name, t in init_mgb_params(rng, d, dtype).items():
            params[f"stage{s}.mgb.{name}"] = t
        for name, t in init_fgb_params(rng, d, dtype).items():
            params[f"stage{s}.fgb.{name}"] = t
    return params


# ---------------------------------------------------------------------------
# blocks


def ncb_forward(feat, params, prefix, return_maps=False):
    """Noise calibration. feat: (d, H, W) -> (d, H, W)."""
    def cv(name, x, **kw):
        return T.conv2d(x, params[f"{prefix}.{name}.w"], params[f"{prefix}.{name}.b"], **kw)

    sigma = cv("est3", T.relu(cv("est2", T.relu(cv("est1", feat, padding=1)), padding=1)), padding=1)
    f_c = cv("fuse", T.concat([feat, sigma], 0), padding=1)
    m_s = T.sigmoid(cv("sp2", T.relu(cv("sp1", f_c, padding=2, dilation=2)),
                       padding=2, dilation=2))
    m_c = T.sigmoid(cv("ch2", T.relu(cv("ch1", T.global_avg_pool(f_c)))))
    out = cv("out", T.concat([T.mul(f_c, m_s), T.mul(f_c, m_c)], 0), padding=1)
    if return_maps:
        return out, m_s, m_c
    return out


def split_channel_heads(x2d, heads):
    """(d, N) -> (heads, d/heads, N): channel-token head split."""
    d, n = x2d.shape
    return T.reshape(x2d, (heads, d // heads, n))


def merge_channel_heads(xh, d, n):
    return T.reshape(xh, (d, n))


def _qkv(x, params, prefix, f):
    y = T.conv2d(x, params[f"{prefix}.{f}.pw.w"], params[f"{prefix}.{f}.pw.b"])
    return T.depthwise_conv2d(y, params[f"{prefix}.{f}.dw.w"], params[f"{prefix}.{f}.dw.b"],
                              padding=1)


def mgb_forward(h, l, params, prefix, heads):
    """Mutual guidance. h, l: (d, H, W) -> refined (h_g, l_g).

    Channel-transposed attention: tokens are channels, split over heads; the
    softmax temperature is 1/sqrt(channels/heads). The query comes from one
    stream, key/value from the other, and each stream is updated through a
    shared zero-initialised 1x1 output conv plus residual.
    """
    if h.shape != l.shape:
        raise T.ShapeError(f"mgb streams disagree: {h.shape} vs {l.shape}")
    d, hh, ww = h.shape
    if d % heads:
        raise T.ShapeError(f"channels {d} not divisible by heads {heads}")
    n = hh * ww
    scale = 1.0 / math.sqrt(d / heads)

    lh = T.layer_norm(h, params[f"{prefix}.ln_h.g"], params[f"{prefix}.ln_h.b"], 0)
    ll = T.layer_norm(l, params[f"{prefix}.ln_l.g"], params[f"{prefix}.ln_l.b"], 0)

    def tokens(x):
        return split_channel_heads(T.reshape(x, (d, n)), heads)

    q_h = tokens(_qkv(lh, params, prefix, "q"))
    k_h = tokens(_qkv(ll, params, prefix, "k"))
    v_h = tokens(_qkv(ll, params, prefix, "v"))
    q_l = tokens(_qkv(ll, params, prefix, "q"))
    k_l = tokens(_qkv(lh, params, prefix, "k"))
    v_l = tokens(_qkv(lh, params, prefix, "v"))

    att_for_h = T.scaled_attention(q_l, k_l, v_l, scale)
    att_for_l = T.scaled_attention(q_h, k_h, v_h, scale)

    def project(att):
        m = T.reshape(merge_channel_heads(att, d, n), (d, hh, ww))
        return T.conv2d(m, params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])

    return h + project(att_for_h), l + project(att_for_l)


def fgb_forward(x, params, prefix):
    """Gated feedforward: x + map(gelu(a(ln)) * b(ln)); shape preserved."""
    ln = T.layer_norm(x, params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"], 0)

    def branch(name):
        y = T.conv2d(ln, params[f"{prefix}.{name}.pw.w"], params[f"{prefix}.{name}.pw.b"])
        return T.depthwise_conv2d(y, params[f"{prefix}.{name}.dw.w"],
                                  params[f"{prefix}.{name}.dw.b"], padding=1)

    gat = T.mul(T.gelu(branch("a")), branch("b"))
    return x + T.conv2d(gat, params[f"{prefix}.map.w"], params[f"{prefix}.map.b"])


def dsr_forward(h_e, l_e, params, heads, stages=2, ncb=True, gating=True,
                prefix="dsr"):
    """NCB per branch, then `stages` sequential MGB+FGB refinements.

    stages=0 bypasses guidance entirely and returns the NCB outputs; ncb and
    gating toggles are the ablation switches.
    """
    if ncb:
        h = ncb_forward(h_e, params, f"{prefix}.ncb_high")
        l = ncb_forward(l_e, params, f"{prefix}.ncb_low")
    else:
        h, l = h_e, l_e
    for s in range(stages):
        h, l = mgb_forward(h, l, params, f"{prefix}.stage{s}.mgb", heads)
        if gating:
            h = fgb_forward(h, params, f"{prefix}.stage{s}.fgb")
            l = fgb_forward(l, params, f"{prefix}.stage{s}.fgb")
    return h, l
