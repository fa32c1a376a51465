"""Raster containers, the MSR1 on-disk format, synthetic scenes and the
reduced-resolution degradation protocol.

Everything here is plain numpy (no tape participation): data generation and
file IO sit outside the differentiable pipeline.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MSR1"
ALLOWED_CHANNELS = (1, 4, 8)


class RasterFormatError(ValueError):
    pass


@dataclass
class Image:
    """H x W x C raster with values in [0, 1], float32."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(np.asarray(self.pixels, dtype=np.float32))
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise RasterFormatError(f"image must be H x W x C, got shape {px.shape}")
        if px.shape[2] not in ALLOWED_CHANNELS:
            raise RasterFormatError(
                f"image channels must be one of {ALLOWED_CHANNELS}, got {px.shape[2]}")
        if not np.isfinite(px).all():
            raise RasterFormatError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise RasterFormatError(
                f"image values must lie in [0,1], got [{px.min():.4g}, {px.max():.4g}]")
        self.pixels = px

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    def chw(self):
        """Channel-first copy for the tensor engine."""
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1))

    @staticmethod
    def from_chw(arr):
        return Image(np.asarray(arr).transpose(1, 2, 0))


@dataclass
class SamplePair:
    """Aligned (PAN, LRMS[, GT]) triple; PAN dims = ratio * LRMS dims."""

    pan: Image
    lrms: Image
    gt: Image | None = None
    ratio: int = 4
    name: str = field(default="")

    def __post_init__(self):
        if self.pan.channels != 1:
            raise RasterFormatError(f"pan must be single-band, got {self.pan.channels}")
        if (self.pan.height != self.ratio * self.lrms.height
                or self.pan.width != self.ratio * self.lrms.width):
            raise RasterFormatError(
                f"pan {self.pan.height}x{self.pan.width} is not {self.ratio}x the "
                f"lrms {self.lrms.height}x{self.lrms.width}")
        if self.gt is not None:
            if (self.gt.height, self.gt.width) != (self.pan.height, self.pan.width):
                raise RasterFormatError("gt dims must equal pan dims")
            if self.gt.channels != self.lrms.channels:
                raise RasterFormatError("gt channels must equal lrms channels")


# ---------------------------------------------------------------------------
# MSR1 binary raster format


def write_raster(path, img: Image):
    px = img.pixels.astype("<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", img.height, img.width, img.channels))
        f.write(px.tobytes())


def read_raster(path) -> Image:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise RasterFormatError(f"{path}: bad magic, expected MSR1")
    if len(blob) < 16:
        raise RasterFormatError(f"{path}: truncated header")
    h, w, c = struct.unpack("<III", blob[4:16])
    if h == 0 or w == 0 or c == 0:
        raise RasterFormatError(f"{path}: zero dimension in header ({h}x{w}x{c})")
    want = 16 + 4 * h * w * c
    if len(blob) < want:
        raise RasterFormatError(
            f"{path}: truncated payload, expected {want} bytes, got {len(blob)}")
    if len(blob) > want:
        raise RasterFormatError(
            f"{path}: trailing bytes, expected {want} bytes, got {len(blob)}")
    px = np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w, c)
    return Image(px)


# ---------------------------------------------------------------------------
# PGM / PPM export (8-bit visual dumps)


def _to_u8(arr):
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, gray):
    """gray: (H, W) in [0, 1]."""
    g = _to_u8(gray)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (g.shape[1], g.shape[0]))
        f.write(g.tobytes())


def write_ppm(path, rgb):
    """rgb: (H, W, 3) in [0, 1]."""
    g = _to_u8(rgb)
    if g.ndim != 3 or g.shape[2] != 3:
        raise RasterFormatError(f"ppm wants (H,W,3), got {g.shape}")
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (g.shape[1], g.shape[0]))
        f.write(g.tobytes())


def write_palette_pgm(path, indices, k):
    """Cluster-index map as spread grayscale levels; valid for K <= 256."""
    if k > 256:
        raise RasterFormatError(f"palette PGM supports at most 256 clusters, got {k}")
    idx = np.asarray(indices, dtype=np.int64)
    if k <= 1:
        levels = np.zeros_like(idx, dtype=np.float64)
    else:
        levels = idx / (k - 1)
    write_pgm(path, levels)


def rgb_composite(img: Image):
    """First three bands (or replicated single band) as an RGB view."""
    px = img.pixels
    if px.shape[2] >= 3:
        return px[:, :, :3]
    return np.repeat(px[:, :, :1], 3, axis=2)


# ---------------------------------------------------------------------------
# synthetic scenes


def synth_scene(seed, size, channels) -> Image:
    """Deterministic multispectral test scene.

    Mixes smooth low-frequency gradients with sharp-edged rectangles and
    disks; band values are correlated draws around shared structures so the
    spectra behave like a real multispectral stack.
    """
    if channels not in (4, 8):
        raise ValueError(f"synth_scene channels must be 4 or 8, got {channels}")
    if size % 4 != 0:
        raise ValueError(f"synth_scene size must be a multiple of 4, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size

    # smooth terrain shared across bands
    terrain = np.zeros((size, size))
    for _ in range(4):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        terrain += rng.uniform(0.3, 1.0) * np.cos(2 * np.pi * (fy * yy + ph[0])) \
            * np.cos(2 * np.pi * (fx * xx + ph[1]))
    terrain = (terrain - terrain.min()) / max(np.ptp(terrain), 1e-9)

    mix = rng.uniform(0.35, 0.75, size=channels)
    base = rng.uniform(0.15, 0.45, size=channels)
    scene = base[None, None, :] + terrain[:, :, None] * mix[None, None, :] * 0.5

    # sharp-edged shapes with band-correlated colours
    n_shapes = 8 + int(rng.integers(0, 5))
    for _ in range(n_shapes):
        tone = rng.uniform(0.1, 0.9)
        color = np.clip(tone + rng.normal(0, 0.08, size=channels), 0.02, 0.98)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, size - 4, size=2)
            hgt = int(rng.integers(size // 16 + 1, size // 3 + 2))
            wid = int(rng.integers(size // 16 + 1, size // 3 + 2))
            mask = np.zeros((size, size), dtype=bool)
            mask[y0:y0 + hgt, x0:x0 + wid] = True
        else:
            cy, cx = rng.uniform(0, size, size=2)
            rad = rng.uniform(size / 16, size / 5)
            mask = (np.mgrid[0:size, 0:size][0] - cy) ** 2 \
                + (np.mgrid[0:size, 0:size][1] - cx) ** 2 <= rad ** 2
        scene[mask] = color[None, :]

    scene = np.clip(scene, 0.0, 1.0)
    return Image(scene.astype(np.float32))


# ---------------------------------------------------------------------------
# reduced-resolution degradation


def gaussian_kernel1d(sigma):
    radius = max(1, int(round(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(pixels, sigma):
    """Separable Gaussian with reflect padding (constants stay constant)."""
    k = gaussian_kernel1d(sigma)
    r = (len(k) - 1) // 2
    arr = np.asarray(pixels, dtype=np.float64)
    pad = np.pad(arr, ((r, r), (0, 0), (0, 0)), mode="reflect")
    out = np.zeros_like(arr)
    for i, kv in enumerate(k):
        out += kv * pad[i:i + arr.shape[0]]
    pad = np.pad(out, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = np.zeros_like(arr)
    for i, kv in enumerate(k):
        out += kv * pad[:, i:i + arr.shape[1]]
    return out


def decimate_centered(arr, ratio):
    """Decimation at block-centre phase: LR pixel i sits at HR position
    ratio*i + (ratio-1)/2, matching the half-pixel-centre convention of the
    bilinear upsampler. For even ratios that is mid-way between two HR
    samples, so the two central taps average."""
    off = (ratio - 1) // 2
    if ratio % 2:
        return arr[off::ratio, off::ratio]
    a = arr[off::ratio, off::ratio]
    b = arr[off + 1::ratio, off::ratio]
    c = arr[off::ratio, off + 1::ratio]
    d = arr[off + 1::ratio, off + 1::ratio]
    return 0.25 * (a + b + c + d)


def wald_degrade(gt: Image, ratio=4, blur_sigma=1.0) -> SamplePair:
    """Blur + decimate a reference into an aligned (PAN, LRMS, GT) triple.

    PAN is the uniform band mean of the reference; LRMS is the Gaussian-blurred
    reference decimated by ``ratio`` phase-aligned to half-pixel centres.
    """
    if gt.height % ratio or gt.width % ratio:
        raise ValueError(
            f"gt dims {gt.height}x{gt.width} not divisible by ratio {ratio}")
    blurred = gaussian_blur(gt.pixels, blur_sigma)
    lrms = np.clip(decimate_centered(blurred, ratio), 0.0, 1.0)
    pan = gt.pixels.mean(axis=2, keepdims=True, dtype=np.float64)
    return SamplePair(pan=Image(pan.astype(np.float32)),
                      lrms=Image(lrms.astype(np.float32)),
                      gt=gt, ratio=ratio)


def extract_patches(pair: SamplePair, ms_patch, stride=None):
    """Aligned crops on the LRMS grid; the PAN/GT crop is the ratio-scaled
    window. stride defaults to ms_patch (non-overlapping)."""
    if stride is None:
        stride = ms_patch
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    hl, wl = pair.lrms.height, pair.lrms.width
    if ms_patch > hl or ms_patch > wl:
        raise ValueError(f"ms_patch {ms_patch} exceeds lrms dims {hl}x{wl}")
    r = pair.ratio
    out = []
    for y in range(0, hl - ms_patch + 1, stride):
        for x in range(0, wl - ms_patch + 1, stride):
            lr = Image(pair.lrms.pixels[y:y + ms_patch, x:x + ms_patch])
            pn = Image(pair.pan.pixels[r * y:r * (y + ms_patch),
                                       r * x:r * (x + ms_patch)])
            g = None
            if pair.gt is not None:
                g = Image(pair.gt.pixels[r * y:r * (y + ms_patch),
                                         r * x:r * (x + ms_patch)])
            out.append(SamplePair(pan=pn, lrms=lr, gt=g, ratio=r,
                                  name=f"{pair.name}@{y},{x}"))
    return out


# ---------------------------------------------------------------------------
# dataset manifests


def write_manifest(path, rows):
    """rows: list of dicts with keys name, gt, pan, lrms, seed."""
    with open(path, "w") as f:
        f.write("# name\tgt\tpan\tlrms\tseed\n")
        for r in rows:
            f.write(f"{r['name']}\t{r.get('gt', '-')}\t{r['pan']}\t{r['lrms']}\t{r.get('seed', '-')}\n")


def load_dataset(dirpath, require_gt=False):
    """Read a manifest-described directory into SamplePairs."""
    manifest = os.path.join(dirpath, "manifest.tsv")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest.tsv in {dirpath}")
    pairs = []
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, gt_p, pan_p, lrms_p, _seed = line.split("\t")
            gt = None
            if gt_p != "-":
                gt = read_raster(os.path.join(dirpath, gt_p))
            elif require_gt:
                raise ValueError(f"sample {name} has no GT raster")
            pan = read_raster(os.path.join(dirpath, pan_p))
            lrms = read_raster(os.path.join(dirpath, lrms_p))
            ratio = pan.height // lrms.height
            pairs.append(SamplePair(pan=pan, lrms=lrms, gt=gt, ratio=ratio, name=name))
    if not pairs:
        raise ValueError(f"dataset at {dirpath} is empty")
    return pairs
