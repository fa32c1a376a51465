"""panfuse: cluster-adaptive frequency-separation pansharpening.

Fuses a high-resolution panchromatic band with a low-resolution
multispectral raster by splitting both into adaptive high/low frequency
components, cross-refining the two streams, and reassembling them with
spatial-frequency attention. Ships its own reverse-mode tensor engine,
synthetic reduced-resolution data tooling, and a full quality-metric suite.
"""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: F401
