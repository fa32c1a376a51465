"""Training loop: AdamW over the flat parameter map, per-step logging and
versioned checkpoints (magic CGF1)."""

import json
import struct
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import model as M
from .data import SamplePair
from .tensor import NumericError, Tensor

CKPT_MAGIC = b"CGF1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 6e-4
    batch: int = 4           # desk-scale default; full-scale runs use 128
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    steps: int = 300
    seed: int = 0
    stop_at_loss: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")

    def to_dict(self):
        return asdict(self)


class AdamW:
    """Decoupled weight decay Adam with bias correction. Moment state and
    the update arithmetic run in float64 (parameters stay at working
    precision); updates apply in sorted name order, so runs are
    bit-reproducible."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros(p.data.shape, np.float64) for k, p in params.items()}
        self.v = {k: np.zeros(p.data.shape, np.float64) for k, p in params.items()}

    def step(self):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name}")
            g = g.astype(np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            upd = p.data.astype(np.float64) - c.lr * (
                mhat / (np.sqrt(vhat) + c.eps) + c.weight_decay * p.data)
            p.data = upd.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def grad_norm(params):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def train_step(batch, params, mcfg, opt, statics=None):
    """One optimizer step over a batch of SamplePairs; returns (loss, gnorm).

    Items run forward/backward one at a time with gradient accumulation
    (scaled to the batch mean), which keeps attention memory bounded by a
    single sample's graph.
    """
    opt.zero_grad()
    total = 0.0
    inv = 1.0 / len(batch)
    for i, pair in enumerate(batch):
        static = statics[i] if statics is not None else None
        out = M.forward(params, mcfg, pair, static=static)
        loss = M.l1_loss(out, Tensor(pair.gt.chw()))
        total += loss.item()
        (loss * inv).backward()
    gnorm = grad_norm(params)
    opt.step()
    return total * inv, gnorm


def train_loop(pairs, params, mcfg, tcfg: TrainConfig, log_fn=None):
    """Runs up to tcfg.steps batches cycled deterministically over `pairs`.

    Stops early once the running batch loss drops below tcfg.stop_at_loss
    (when set). Returns the per-step log records.
    """
    if not pairs:
        raise ValueError("empty dataset")
    for p in pairs:
        if p.gt is None:
            raise ValueError("training requires GT rasters (reduced-resolution protocol)")
    statics = [M.make_static(mcfg, p) for p in pairs]
    opt = AdamW(params, tcfg)
    n = len(pairs)
    records = []
    for step in range(tcfg.steps):
        idx = [(step * tcfg.batch + j) % n for j in range(tcfg.batch)]
        batch = [pairs[i] for i in idx]
        stat = [statics[i] for i in idx]
        t0 = time.perf_counter()
        loss, gnorm = train_step(batch, params, mcfg, opt, stat)
        rec = {"step": step, "loss": loss, "grad_norm": gnorm,
               "wall_ms": (time.perf_counter() - t0) * 1000.0}
        records.append(rec)
        if log_fn is not None:
            log_fn(rec)
        if tcfg.stop_at_loss is not None and loss < tcfg.stop_at_loss:
            break
    return records


def write_log(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, config):
    """Flat name -> float32 payload blocks after a JSON config echo."""
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    cfg_json = json.dumps(config, sort_keys=True).encode()
    blob += struct.pack("<I", len(cfg_json))
    blob += cfg_json
    names = sorted(params)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path):
    """Returns (params dict name -> float32 ndarray, config dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, expected CGF1")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = json.loads(blob[off:off + clen].decode())
    off += clen
    (nparams,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(nparams):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        params[name] = arr.copy()
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    return params, config


def params_to_tensors(arrays):
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def load_model(path):
    """Checkpoint -> (params dict of Tensors, ModelConfig)."""
    arrays, config = load_checkpoint(path)
    mcfg = M.ModelConfig.from_dict(config["model"])
    return params_to_tensors(arrays), mcfg
