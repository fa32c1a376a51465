"""Cluster-adaptive frequency separation.

Pipeline per branch (PAN and upsampled MS have independent parameter sets
and cluster maps):

  1. per-pixel window-mean features over a zero-padded k x k neighbourhood
  2. k-means over those features -> cluster index map
  3. per-cluster centroid of the unfolded k x k patches
  4. two small MLPs map each centroid to a low-rank filter pair A_i, B_i;
     the per-cluster low-pass filter is their product
  5. low(x,y) = patch(x,y) @ W_cluster(x,y); high = image - low

Cluster assignments are gradient-stopped constants; centroid averaging and
filter synthesis stay on the tape. A shared 3x3 convolution then projects
the concatenated high (and low) components of both branches to the working
feature width.

Three fixed separators (gaussian / fourier / local) provide the ablation
baselines; all separators satisfy high + low == input by construction.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import Tensor

MLP_HIDDEN = 64


@dataclass
class ClusterMap:
    indices: np.ndarray  # (H, W) int64 in [0, K)
    k: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= self.k:
            raise ValueError(f"cluster indices outside [0, {self.k})")
        self.indices = idx


@dataclass
class FreqPair:
    """Complementary components: high + low == source (to float32 rounding)."""
    high: Tensor
    low: Tensor


@dataclass
class CanStatic:
    """Per-image, per-branch artefacts that do not depend on trainable
    parameters: cluster labels, patch matrix, empty-cluster fill indices."""
    labels: np.ndarray        # (H*W,)
    fill_index: np.ndarray    # (K,) nearest non-empty cluster per cluster
    patches: Tensor           # (H*W, k*k*C), constant leaf
    cluster_map: ClusterMap
    inertia_trace: list


# ---------------------------------------------------------------------------
# window features and clustering


def window_features(pixels, k):
    """Per-pixel mean over the zero-padded k x k window; returns (H, W, C)
    float64. This is the clustering feature."""
    if k % 2 == 0:
        raise ValueError(f"window size must be odd, got {k}")
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    r = k // 2
    pad = np.zeros((h + 2 * r, w + 2 * r, c))
    pad[r:r + h, r:r + w] = arr
    out = np.zeros_like(arr)
    for dy in range(k):
        for dx in range(k):
            out += pad[dy:dy + h, dx:dx + w]
    return out / (k * k)


def _plus_plus_seeds(feats, k, rng):
    n = feats.shape[0]
    cents = np.empty((k, feats.shape[1]), dtype=np.float64)
    cents[0] = feats[int(rng.integers(n))]
    d2 = ((feats - cents[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        tot = d2.sum()
        if not np.isfinite(tot) or tot <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / tot))
        cents[i] = feats[pick]
        d2 = np.minimum(d2, ((feats - cents[i]) ** 2).sum(axis=1))
    return cents


def kmeans(features, k, seed, max_iter=50, tol=1e-6):
    """Lloyd iterations with k-means++ seeding.

    features: (N, F). Returns (labels (N,), centroids (K, F), inertia_trace).
    The trace records inertia after every assignment step and is
    non-increasing; iteration stops at max_iter or relative change < tol.
    Empty clusters keep their previous centroid. Ties in the assignment go
    to the lower cluster index.
    """
    feats = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    n = feats.shape[0]
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"K={k} exceeds the pixel count {n}")
    rng = np.random.default_rng(seed)
    cents = _plus_plus_seeds(feats, k, rng)
    impl = kernels.active
    trace = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        labels, d2 = impl.kmeans_assign(feats, cents)
        inertia = float(d2.sum())
        trace.append(inertia)
        if len(trace) > 1 and abs(trace[-2] - inertia) <= tol * max(abs(trace[-2]), 1e-30):
            break
        sums, counts = impl.segment_sum(feats, labels, k)
        nz = counts > 0
        cents = cents.copy()
        cents[nz] = sums[nz] / counts[nz, None]
    return labels, cents, trace


def nearest_nonempty_fill(feat_cents, counts):
    """fill_index[i] = i when cluster i is populated, else the nearest
    populated cluster by centroid distance (ties to the lower index)."""
    k = counts.shape[0]
    fill = np.arange(k, dtype=np.int64)
    empty = np.flatnonzero(counts == 0)
    if empty.size == 0:
        return fill
    busy = np.flatnonzero(counts > 0)
    if busy.size == 0:
        raise ValueError("all clusters empty")
    for i in empty:
        d = ((feat_cents[busy] - feat_cents[i]) ** 2).sum(axis=1)
        fill[i] = busy[int(np.argmin(d))]
    return fill


# ---------------------------------------------------------------------------
# centroid-conditioned filter synthesis


def cluster_centroids(patches, labels, k, fill_index=None):
    """Mean unfolded patch per cluster; differentiable w.r.t. patches.

    patches: Tensor (N, P); labels: (N,) ints. Empty clusters take the
    centroid of fill_index[i] (defaults to identity, i.e. zero rows).
    Returns (centroids Tensor (K, P), counts).
    """
    means, counts = T.segment_mean(patches, labels, k)
    if fill_index is not None and (counts == 0).any():
        means = T.gather_rows(means, fill_index)
    return means, counts


def _mlp(cents, params, prefix):
    h = T.gelu(T.matmul(cents, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return T.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def generate_filters(centroids, params, prefix, rank, cout):
    """Low-rank filter bank W_i = A_i @ B_i from per-cluster centroids.

    centroids: Tensor (K, P). A_i is (P, rank), B_i is (rank, cout); both
    come from independent two-layer MLPs on the same centroid. Returns the
    bank as a Tensor (K, P, cout), differentiable in MLP weights and
    centroids.
    """
    if rank <= 0:
        raise ValueError(f"rank must be positive, got {rank}")
    k, p = centroids.shape
    a = _mlp(centroids, params, f"{prefix}.mlp_a")
    b = _mlp(centroids, params, f"{prefix}.mlp_b")
    a = T.reshape(a, (k, p, rank))
    b = T.reshape(b, (k, rank, cout))
    return T.bmm(a, b)


def init_branch_params(rng, cin, k, rank, dtype=np.float32):
    p = k * k * cin
    def lin(fan_in, fan_out):
        return (Tensor(T.init_weight(rng, (fan_in, fan_out), dtype=dtype), requires_grad=True),
                Tensor(T.zeros((fan_out,), dtype=dtype), requires_grad=True))
    out = {}
    for mlp, width in (("mlp_a", p * rank), ("mlp_b", rank * cin)):
        w1, b1 = lin(p, MLP_HIDDEN)
        w2, b2 = lin(MLP_HIDDEN, width)
        out[f"{mlp}.w1"], out[f"{mlp}.b1"] = w1, b1
        out[f"{mlp}.w2"], out[f"{mlp}.b2"] = w2, b2
    return out


def init_cafs_params(rng, channels, k, rank, d, dtype=np.float32):
    """Parameter dict for both branches plus the shared projection."""
    params = {}
    for branch, cin in (("pan", 1), ("ms", channels)):
        for name, t in init_branch_params(rng, cin, k, rank, dtype).items():
            params[f"{branch}.{name}"] = t
    params["proj.w"] = Tensor(T.init_weight(rng, (d, 1 + channels, 3, 3), dtype=dtype),
                              requires_grad=True)
    params["proj.b"] = Tensor(T.zeros((d,), dtype=dtype), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# the separator


def compute_can_static(img, window, n_clusters, seed, max_iter=50):
    """Clustering artefacts for one image (CHW Tensor or array).

    These depend only on the raw input, never on trainable parameters, so
    callers may compute them once per image and reuse across steps.
    """
    chw = img.data if isinstance(img, Tensor) else np.asarray(img)
    c, h, w = chw.shape
    feats = window_features(chw.transpose(1, 2, 0), window).reshape(h * w, c)
    labels, feat_cents, trace = kmeans(feats, n_clusters, seed, max_iter=max_iter)
    counts = np.bincount(labels, minlength=n_clusters)
    fill = nearest_nonempty_fill(feat_cents, counts)
    img_t = img if isinstance(img, Tensor) else Tensor(chw)
    patches = T.unfold(img_t, window)  # (H, W, k*k*C)
    patches = T.reshape(patches, (h * w, window * window * c))
    cmap = ClusterMap(labels.reshape(h, w), n_clusters)
    return CanStatic(labels=labels, fill_index=fill, patches=patches,
                     cluster_map=cmap, inertia_trace=trace)


def can_separate(img, params, prefix, window, n_clusters, rank, seed,
                 static=None):
    """Adaptive frequency split of one branch.

    img: CHW Tensor; params[prefix + ".mlp_a/..."], the branch MLPs.
    Returns (FreqPair, ClusterMap). low is the per-cluster filtered image,
    high = img - low, so reconstruction is exact by construction.
    """
    c, h, w = img.shape
    if static is None:
        static = compute_can_static(img, window, n_clusters, seed)
    cents, _counts = cluster_centroids(static.patches, static.labels,
                                       n_clusters, static.fill_index)
    bank = generate_filters(cents, params, prefix, rank, c)
    low_flat = T.cluster_filters(static.patches, bank, static.labels)
    low = T.transpose(T.reshape(low_flat, (h, w, c)), (2, 0, 1))
    high = img - low
    return FreqPair(high=high, low=low), static.cluster_map


def project(high_p, high_m, low_p, low_m, params, prefix="cafs"):
    """Shared 3x3 projection of the concatenated high and low components.

    The same conv weights map both concatenations; output width is the
    kernel's out-channel count.
    """
    w, b = params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"]
    want = w.shape[1]
    got = high_p.shape[0] + high_m.shape[0]
    if got != want:
        raise T.ShapeError(
            f"projection expects {want} channels (pan+ms), got {got}")
    h_e = T.conv2d(T.concat([high_p, high_m], 0), w, b, padding=1)
    l_e = T.conv2d(T.concat([low_p, low_m], 0), w, b, padding=1)
    return h_e, l_e


# ---------------------------------------------------------------------------
# fixed separators (ablation baselines)

BASELINE_KINDS = ("gaussian", "fourier", "local")


def _sep_gauss_kernel():
    t = np.arange(-2, 3, dtype=np.float64)
    k = np.exp(-0.5 * t * t)
    return k / k.sum()


def _reflect_sep_filter(arr, k1d):
    r = (len(k1d) - 1) // 2
    pad = np.pad(arr, ((r, r), (0, 0), (0, 0)), mode="reflect")
    out = np.zeros_like(arr)
    for i, kv in enumerate(k1d):
        out += kv * pad[i:i + arr.shape[0]]
    pad = np.pad(out, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(arr)
    for i, kv in enumerate(k1d):
        out += kv * pad[:, i:i + arr.shape[1]]
    return out


def _box_filter(arr, k):
    k1d = np.full(k, 1.0 / k)
    return _reflect_sep_filter(arr, k1d)


def baseline_separate(pixels, kind):
    """Fixed-filter frequency split; pixels: (H, W, C) -> (high, low) float64.

    gaussian: 5-tap sigma-1 blur. fourier: centred disk low-pass of radius
    min(H,W)/8 on the per-channel DFT. local: two-scale box filter switched
    by local 3x3 variance against its image mean.
    """
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if kind == "gaussian":
        low = _reflect_sep_filter(arr, _sep_gauss_kernel())
    elif kind == "fourier":
        h, w, _ = arr.shape
        rad = min(h, w) / 8.0
        fy = np.fft.fftfreq(h) * h
        fx = np.fft.fftfreq(w) * w
        mask = (fy[:, None] ** 2 + fx[None, :] ** 2) <= rad * rad
        low = np.empty_like(arr)
        for c in range(arr.shape[2]):
            spec = np.fft.fft2(arr[:, :, c])
            low[:, :, c] = np.fft.ifft2(spec * mask).real
    elif kind == "local":
        m3 = _box_filter(arr, 3)
        v3 = np.maximum(_box_filter(arr * arr, 3) - m3 * m3, 0.0)
        tau = v3.mean()
        m7 = _box_filter(arr, 7)
        low = np.where(v3 > tau, m3, m7)
    else:
        raise ValueError(f"unknown separator kind {kind!r}; expected one of {BASELINE_KINDS}")
    return arr - low, low
