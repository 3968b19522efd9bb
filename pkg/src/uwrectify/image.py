"""Linear-light image buffers, gamma conversion and image metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

GAMMA = 2.4


@dataclass
class ImageBuffer:
    """(H, W, C) linear radiance plus a per-pixel validity mask."""

    data: NDArray
    mask: NDArray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim == 2:
            self.data = self.data[..., None]
        if self.data.ndim != 3:
            raise ValueError("image data must be (H, W) or (H, W, C)")
        if self.mask is None:
            self.mask = np.ones(self.data.shape[:2], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.data.shape[:2]:
            raise ValueError("mask shape does not match image")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def copy(self) -> ImageBuffer:
        return ImageBuffer(self.data.copy(), self.mask.copy())

    def valid_mean(self, per_channel: bool = False):
        """Mean over valid pixels, channels pooled unless ``per_channel``."""
        vals = self.data[self.mask]
        if per_channel:
            return vals.mean(axis=0) if len(vals) else np.zeros(self.channels)
        return float(vals.mean()) if vals.size else 0.0


def linear_to_srgb(x: ArrayLike) -> NDArray:
    """Display encoding with a pure 2.4 power law (input clamped to [0, 1])."""
    return np.clip(np.asarray(x, dtype=float), 0.0, 1.0) ** (1.0 / GAMMA)


def srgb_to_linear(y: ArrayLike) -> NDArray:
    """Inverse of :func:`linear_to_srgb`."""
    return np.clip(np.asarray(y, dtype=float), 0.0, 1.0) ** GAMMA


def to_uint8(x: ArrayLike) -> NDArray:
    """Gamma-encode linear values and quantize to 8 bits."""
    return np.round(linear_to_srgb(x) * 255.0).astype(np.uint8)


def psnr(a: ArrayLike, b: ArrayLike, mask: ArrayLike | None = None, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, optionally over masked pixels only."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    diff = a - b
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    mse = float(np.mean(diff**2))
    if mse == 0:
        return np.inf
    return 10.0 * np.log10(peak**2 / mse)
