"""Model assembly: separator -> projection -> dual-stream refinement ->
spatial-frequency fusion, plus the parameter initialiser shared by the
trainer and the CLI."""

from dataclasses import dataclass, asdict, fields

import numpy as np

from . import cafs, dsr, sfa
from . import tensor as T
from .data import SamplePair
from .tensor import Tensor

SEPARATORS = ("cluster",) + cafs.BASELINE_KINDS


@dataclass
class ModelConfig:
    channels: int = 4
    clusters: int = 32       # training-time K; eval may re-cluster with another K
    window: int = 3
    rank: int = 4
    d: int = 32
    heads: int = 8
    dsr_stages: int = 2
    ratio: int = 4
    separator: str = "cluster"
    sfa_mode: str = "full"
    ncb: bool = True
    gating: bool = True
    global_skip: bool = False
    cluster_seed: int = 0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.window % 2 == 0:
            raise ValueError(f"window must be odd, got {self.window}")
        if self.separator not in SEPARATORS:
            raise ValueError(f"separator must be one of {SEPARATORS}, got {self.separator!r}")
        if self.sfa_mode not in sfa.SFA_MODES:
            raise ValueError(f"sfa_mode must be one of {sfa.SFA_MODES}, got {self.sfa_mode!r}")

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        names = {f.name for f in fields(ModelConfig)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return ModelConfig(**d)


def init_model_params(cfg: ModelConfig, seed):
    """Flat name -> Tensor parameter map; deterministic in (cfg, seed)."""
    rng = np.random.default_rng(seed)
    params = {}
    if cfg.separator == "cluster":
        for name, t in cafs.init_cafs_params(rng, cfg.channels, cfg.window,
                                             cfg.rank, cfg.d).items():
            params[f"cafs.{name}"] = t
    else:
        # fixed separators still need the shared projection
        params["cafs.proj.w"] = Tensor(
            T.init_weight(rng, (cfg.d, 1 + cfg.channels, 3, 3)), requires_grad=True)
        params["cafs.proj.b"] = Tensor(T.zeros((cfg.d,)), requires_grad=True)
    dsr_p = {}
    if cfg.ncb:
        for branch in ("high", "low"):
            for name, t in dsr.init_ncb_params(rng, cfg.d).items():
                dsr_p[f"ncb_{branch}.{name}"] = t
    for s in range(cfg.dsr_stages):
        for name, t in dsr.init_mgb_params(rng, cfg.d).items():
            dsr_p[f"stage{s}.mgb.{name}"] = t
        if cfg.gating:
            for name, t in dsr.init_fgb_params(rng, cfg.d).items():
                dsr_p[f"stage{s}.fgb.{name}"] = t
    for name, t in dsr_p.items():
        params[f"dsr.{name}"] = t
    for name, t in sfa.init_sfa_params(rng, cfg.channels, cfg.d, cfg.sfa_mode).items():
        params[f"sfa.{name}"] = t
    return params


def make_static(cfg: ModelConfig, pair: SamplePair, clusters=None,
                dtype=np.float32):
    """Per-sample clustering artefacts (cluster separator only). These only
    depend on the raw inputs, so trainers compute them once per sample."""
    if cfg.separator != "cluster":
        return None
    k = clusters if clusters is not None else cfg.clusters
    pan_t = Tensor(pair.pan.chw().astype(dtype))
    ms_up_arr = _upsampled_lrms(pair, dtype)
    return {
        "pan": cafs.compute_can_static(pan_t, cfg.window, k, cfg.cluster_seed),
        "ms": cafs.compute_can_static(Tensor(ms_up_arr), cfg.window, k, cfg.cluster_seed),
        "ms_up": ms_up_arr,
    }


def _upsampled_lrms(pair: SamplePair, dtype=np.float32):
    from . import kernels
    lr = pair.lrms.chw().astype(dtype)
    return kernels.impl_for(lr.dtype).bilinear_up_forward(lr, pair.ratio)


def _params_dtype(params):
    for p in params.values():
        return p.data.dtype
    return np.dtype(np.float32)


def forward(params, cfg: ModelConfig, pair: SamplePair, static=None):
    """Full pipeline for one sample; returns the fused (C, H, W) tensor.

    Inputs are cast to the parameter dtype, so a float64 parameter set runs
    the whole pipeline at oracle precision.
    """
    if pair.lrms.channels != cfg.channels:
        raise T.ShapeError(
            f"model built for {cfg.channels} bands, sample has {pair.lrms.channels}")
    if pair.ratio != cfg.ratio:
        raise T.ShapeError(f"model ratio {cfg.ratio} != sample ratio {pair.ratio}")
    dtype = _params_dtype(params)
    pan_t = Tensor(pair.pan.chw().astype(dtype))
    ms_up = T.bilinear_upsample(Tensor(pair.lrms.chw().astype(dtype)), cfg.ratio)

    if cfg.separator == "cluster":
        fp_p, _ = cafs.can_separate(pan_t, params, "cafs.pan", cfg.window,
                                    cfg.clusters, cfg.rank, cfg.cluster_seed,
                                    static=None if static is None else static["pan"])
        fp_m, _ = cafs.can_separate(ms_up, params, "cafs.ms", cfg.window,
                                    cfg.clusters, cfg.rank, cfg.cluster_seed,
                                    static=None if static is None else static["ms"])
    else:
        fp_p = _baseline_pair(pan_t.data, cfg.separator)
        fp_m = _baseline_pair(ms_up.data, cfg.separator)

    h_e, l_e = cafs.project(fp_p.high, fp_m.high, fp_p.low, fp_m.low, params)
    h_bg, l_bg = dsr.dsr_forward(h_e, l_e, params, cfg.heads, cfg.dsr_stages,
                                 ncb=cfg.ncb, gating=cfg.gating)
    out = sfa.sfa_forward(pan_t, ms_up, h_bg, l_bg, params, "sfa", cfg.heads,
                          mode=cfg.sfa_mode)
    if cfg.global_skip:
        out = out + ms_up
    return out


def _baseline_pair(chw, kind):
    high, low = cafs.baseline_separate(chw.transpose(1, 2, 0), kind)
    return cafs.FreqPair(
        high=Tensor(high.transpose(2, 0, 1).astype(chw.dtype)),
        low=Tensor(low.transpose(2, 0, 1).astype(chw.dtype)))


def l1_loss(pred, gt):
    """Mean absolute difference over all elements."""
    if pred.shape != gt.shape:
        raise T.ShapeError(f"l1_loss shapes disagree: {pred.shape} vs {gt.shape}")
    return T.mean_(T.abs_(pred - gt))
