"""Pansharpening quality indices.

Reduced-resolution (against GT): PSNR, SSIM, SCC, SAM, ERGAS.
Full-resolution (no reference): D_lambda, D_s and their HQNR product, built
on the Wang-Bovik universal quality index over 32x32 blocks.

Everything computes in float64. Inputs are H x W x C arrays (or H x W for
single-band) with values in [0, 1]; shape or range violations raise
MetricError. Centralised protocol constants live at the top of the module.
"""

import numpy as np

from .data import decimate_centered, gaussian_blur

# protocol constants
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
Q_BLOCK = 32
Q_STRIDE = 32
DLAMBDA_P = 1
DS_Q = 1
HQNR_BLUR_SIGMA = 1.0
PSNR_CAP_DB = 99.0
PSNR_MSE_FLOOR = 1e-10
EPS = 1e-14

LAPLACIAN = np.array([[0.0, -1.0, 0.0],
                      [-1.0, 4.0, -1.0],
                      [0.0, -1.0, 0.0]])


class MetricError(ValueError):
    pass


def _img(a, name="image"):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise MetricError(f"{name} must be H x W x C, got shape {arr.shape}")
    return arr


def _pair(pred, gt):
    p, g = _img(pred, "pred"), _img(gt, "gt")
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    return p, g


# ---------------------------------------------------------------------------
# reduced-resolution metrics


def psnr(pred, gt):
    """10*log10(1/MSE) over all elements (range 1), capped at 99 dB."""
    p, g = _pair(pred, gt)
    mse = float(((p - g) ** 2).mean())
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size, sigma):
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (t / sigma) ** 2)
    w = np.outer(k, k)
    return w / w.sum()


def _filter_valid(band, kernel):
    kh, kw = kernel.shape
    h, w = band.shape
    oh, ow = h - kh + 1, w - kw + 1
    if oh <= 0 or ow <= 0:
        raise MetricError(f"image {h}x{w} smaller than {kh}x{kw} filter")
    out = np.zeros((oh, ow))
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * band[i:i + oh, j:j + ow]
    return out


def ssim(pred, gt):
    """Mean structural similarity per band, averaged over bands.

    Gaussian window 11x11 sigma 1.5 (clipped to the largest odd size that
    fits small images), K1=0.01, K2=0.03, dynamic range 1.
    """
    p, g = _pair(pred, gt)
    h, w, c = p.shape
    win = min(SSIM_WINDOW, h, w)
    if win % 2 == 0:
        win -= 1
    if win < 2:
        raise MetricError("image too small for SSIM")
    kernel = _gaussian_window(win, SSIM_SIGMA)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    vals = []
    for b in range(c):
        x, y = p[:, :, b], g[:, :, b]
        mx = _filter_valid(x, kernel)
        my = _filter_valid(y, kernel)
        mxx = _filter_valid(x * x, kernel)
        myy = _filter_valid(y * y, kernel)
        mxy = _filter_valid(x * y, kernel)
        vx = mxx - mx * mx
        vy = myy - my * my
        vxy = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * vxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(float((num / den).mean()))
    return float(np.mean(vals))


def scc(pred, gt):
    """Pearson correlation of Laplacian-filtered bands, band-averaged."""
    p, g = _pair(pred, gt)
    vals = []
    for b in range(p.shape[2]):
        x = _filter_valid(p[:, :, b], LAPLACIAN).ravel()
        y = _filter_valid(g[:, :, b], LAPLACIAN).ravel()
        xc = x - x.mean()
        yc = y - y.mean()
        vx = (xc * xc).sum()
        vy = (yc * yc).sum()
        if vx < EPS and vy < EPS:
            vals.append(1.0 if np.allclose(x, y) else 0.0)
        elif vx < EPS or vy < EPS:
            vals.append(0.0)
        else:
            vals.append(float((xc * yc).sum() / np.sqrt(vx * vy)))
    return float(np.mean(vals))


def sam(pred, gt):
    """Mean spectral angle in degrees; pixels where either spectral vector
    has norm < 1e-8 are skipped.

    Computed as atan2(sqrt(|a|^2|b|^2 - (a.b)^2), a.b): identical spectra
    cancel exactly, so sam(x, x) is 0.0 rather than an arccos rounding dust.
    """
    p, g = _pair(pred, gt)
    n2p = (p * p).sum(axis=2)
    n2g = (g * g).sum(axis=2)
    keep = (n2p >= 1e-16) & (n2g >= 1e-16)
    if not keep.any():
        return 0.0
    dot = (p * g).sum(axis=2)[keep]
    cross2 = np.maximum(n2p[keep] * n2g[keep] - dot * dot, 0.0)
    ang = np.arctan2(np.sqrt(cross2), dot)
    return float(np.degrees(ang).mean())


def ergas(pred, gt, ratio):
    """100/ratio * sqrt(mean_b((RMSE_b / mean_b)^2))."""
    p, g = _pair(pred, gt)
    mu = g.reshape(-1, g.shape[2]).mean(axis=0)
    if (np.abs(mu) < 1e-8).any():
        raise MetricError("ergas: degenerate band mean below 1e-8")
    mse = ((p - g) ** 2).reshape(-1, g.shape[2]).mean(axis=0)
    return float(100.0 / ratio * np.sqrt((mse / (mu * mu)).mean()))


# ---------------------------------------------------------------------------
# no-reference metrics


def q_index(a, b):
    """Wang-Bovik universal image quality index over 32x32 blocks with
    stride 32 (block clipped to the image for small inputs)."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[:, :, 0]
    if y.ndim == 3 and y.shape[2] == 1:
        y = y[:, :, 0]
    if x.shape != y.shape or x.ndim != 2:
        raise MetricError(f"q_index wants matching 2-d bands, got {x.shape} vs {y.shape}")
    h, w = x.shape
    bs = min(Q_BLOCK, h, w)
    if bs < 2:
        raise MetricError("q_index needs blocks of at least 2x2")
    vals = []
    for by in range(0, h - bs + 1, Q_STRIDE):
        for bx in range(0, w - bs + 1, Q_STRIDE):
            xb = x[by:by + bs, bx:bx + bs].ravel()
            yb = y[by:by + bs, bx:bx + bs].ravel()
            mx, my = xb.mean(), yb.mean()
            vx = xb.var(ddof=1)
            vy = yb.var(ddof=1)
            vxy = ((xb - mx) * (yb - my)).sum() / (xb.size - 1)
            d1 = vx + vy
            d2 = mx * mx + my * my
            if d1 < EPS and d2 < EPS:
                vals.append(1.0)
            elif d1 < EPS:
                vals.append(2.0 * mx * my / d2)
            elif d2 < EPS:
                vals.append(2.0 * vxy / d1)
            else:
                vals.append(4.0 * vxy * mx * my / (d1 * d2))
    return float(np.mean(vals))


def d_lambda(fused, lrms):
    """Spectral distortion: inter-band Q structure of the fused product vs
    the input LRMS, p=1."""
    f = _img(fused, "fused")
    l = _img(lrms, "lrms")
    c = f.shape[2]
    if c < 2 or l.shape[2] != c:
        raise MetricError(f"d_lambda needs >= 2 matching bands, got {c} and {l.shape[2]}")
    diffs = []
    for i in range(c):
        for j in range(i + 1, c):
            qf = q_index(f[:, :, i], f[:, :, j])
            ql = q_index(l[:, :, i], l[:, :, j])
            diffs.append(abs(qf - ql) ** DLAMBDA_P)
    return float(np.mean(diffs) ** (1.0 / DLAMBDA_P))


def degrade_pan(pan, ratio):
    """The D_s reference degradation: Gaussian blur sigma 1.0 then
    decimation by `ratio` at block-centre phase (same protocol as the
    reduced-resolution data generation)."""
    p = _img(pan, "pan")
    blurred = gaussian_blur(p, HQNR_BLUR_SIGMA)
    return decimate_centered(blurred, ratio)[:, :, 0]


def d_s(fused, pan, lrms):
    """Spatial distortion: per-band Q against PAN at full scale vs against
    degraded PAN at LRMS scale, q=1."""
    f = _img(fused, "fused")
    p = _img(pan, "pan")
    l = _img(lrms, "lrms")
    if p.shape[2] != 1:
        raise MetricError(f"pan must be single-band, got {p.shape[2]}")
    if f.shape[:2] != p.shape[:2]:
        raise MetricError(f"fused {f.shape[:2]} and pan {p.shape[:2]} disagree")
    if f.shape[0] % l.shape[0] or f.shape[0] // l.shape[0] != f.shape[1] // l.shape[1]:
        raise MetricError("fused dims must be an integer multiple of lrms dims")
    ratio = f.shape[0] // l.shape[0]
    pan_lr = degrade_pan(p, ratio)
    diffs = []
    for b in range(f.shape[2]):
        qh = q_index(f[:, :, b], p[:, :, 0])
        ql = q_index(l[:, :, b], pan_lr)
        diffs.append(abs(qh - ql) ** DS_Q)
    return float(np.mean(diffs) ** (1.0 / DS_Q))


def hqnr(fused, pan, lrms):
    """(1 - D_lambda) * (1 - D_s); returns (hqnr, d_lambda, d_s)."""
    dl = d_lambda(fused, lrms)
    ds = d_s(fused, pan, lrms)
    return (1.0 - dl) * (1.0 - ds), dl, ds


# ---------------------------------------------------------------------------
# reports


REDUCED_KEYS = ("psnr", "ssim", "scc", "sam", "ergas")
FULL_KEYS = ("d_lambda", "d_s", "hqnr")


def reduced_metrics(pred, gt, ratio):
    return {
        "psnr": psnr(pred, gt),
        "ssim": ssim(pred, gt),
        "scc": scc(pred, gt),
        "sam": sam(pred, gt),
        "ergas": ergas(pred, gt, ratio),
    }


def full_metrics(fused, pan, lrms):
    h, dl, ds = hqnr(fused, pan, lrms)
    return {"d_lambda": dl, "d_s": ds, "hqnr": h}


def aggregate(rows):
    """Per-metric mean and std over per-image dicts."""
    if not rows:
        raise MetricError("no rows to aggregate")
    keys = list(rows[0].keys())
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        out[k] = (float(vals.mean()), float(vals.std()))
    return out


def format_report(names, rows):
    """Line-delimited per-image records plus a mean +/- std footer."""
    keys = list(rows[0].keys())
    lines = []
    for name, row in zip(names, rows):
        vals = "\t".join(f"{k}={row[k]:.6f}" for k in keys)
        lines.append(f"{name}\t{vals}")
    agg = aggregate(rows)
    vals = "\t".join(f"{k}={m:.3f}±{s:.3f}" for k, (m, s) in agg.items())
    lines.append(f"aggregate\t{vals}")
    return "\n".join(lines)
