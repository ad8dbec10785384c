"""Deterministic pixel-space core: RGBA images, premultiplication, color
padding of invisible pixels, and "over" compositing.

Conventions: RGB values live in [-1, 1], alpha in [0, 1]. Arrays are float32,
shaped (h, w, 3) for color and (h, w, 1) for alpha.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PAD_KERNEL_SIZE = 13
PAD_SIGMA = 2.0
PAD_ITERATIONS = 64


def gaussian_taps(size: int = PAD_KERNEL_SIZE, sigma: float = PAD_SIGMA) -> np.ndarray:
    """1-D Gaussian taps, normalized to sum 1 (float64)."""
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


@dataclass(frozen=True)
class TransparentImage:
    """Straight-alpha RGBA raster: rgb (h, w, 3) in [-1, 1], alpha (h, w, 1) in [0, 1]."""

    rgb: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        rgb, alpha = self.rgb, self.alpha
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (h, w, 3), got {rgb.shape}")
        if alpha.ndim != 3 or alpha.shape[2] != 1:
            raise ValueError(f"alpha must be (h, w, 1), got {alpha.shape}")
        if rgb.shape[:2] != alpha.shape[:2]:
            raise ValueError(f"rgb {rgb.shape[:2]} and alpha {alpha.shape[:2]} disagree")
        if rgb.shape[0] < 1 or rgb.shape[1] < 1:
            raise ValueError("empty image")
        if rgb.min() < -1.0 or rgb.max() > 1.0:
            raise ValueError("rgb values outside [-1, 1]")
        if alpha.min() < 0.0 or alpha.max() > 1.0:
            raise ValueError("alpha values outside [0, 1]")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass(frozen=True)
class PremultipliedImage:
    """RGB multiplied elementwise by alpha; behaves like an opaque image."""

    rgb: np.ndarray


@dataclass(frozen=True)
class PaddedImage:
    """RGB with invisible (alpha == 0) pixels filled by iterated Gaussian
    diffusion of neighboring colors. defined_mask marks alpha > 0 pixels,
    which are kept bit-identical to the source."""

    rgb: np.ndarray
    defined_mask: np.ndarray


def premultiply(img: TransparentImage) -> PremultipliedImage:
    return PremultipliedImage(rgb=img.rgb * img.alpha)


def pad_undefined(img: TransparentImage) -> PaddedImage:
    """Fill invisible pixels by repeatedly Gaussian-filtering the color plane.

    The mask of defined pixels is frozen from the input alpha. Each of the 64
    iterations filters the current colors with a 13x13 Gaussian (replicate
    borders) and replaces only the undefined pixels with the filtered values.
    Filter math runs in float64; results are written back as float32 so that
    defined pixels keep their exact source bits.
    """
    defined = img.alpha[:, :, 0] > 0.0
    out = img.rgb.copy()
    if defined.all():
        return PaddedImage(rgb=out, defined_mask=defined)

    taps = gaussian_taps()
    work = img.rgb.astype(np.float64)
    undefined = ~defined
    for _ in range(PAD_ITERATIONS):
        blurred = ndimage.correlate1d(work, taps, axis=0, mode="nearest")
        blurred = ndimage.correlate1d(blurred, taps, axis=1, mode="nearest")
        work[undefined] = blurred[undefined]
    out[undefined] = work[undefined].astype(np.float32)
    return PaddedImage(rgb=out, defined_mask=defined)


def alpha_blend(fg: TransparentImage, bg: np.ndarray) -> np.ndarray:
    """Standard "over" compositing of a transparent layer onto an opaque image."""
    if bg.shape != fg.rgb.shape:
        raise ValueError(f"background {bg.shape} does not match foreground {fg.rgb.shape}")
    return fg.rgb * fg.alpha + bg * (1.0 - fg.alpha)


def compose_stack(layers: list[TransparentImage], base: np.ndarray) -> np.ndarray:
    """Left-fold of alpha_blend: earliest layer first, later layers occlude."""
    out = base
    for layer in layers:
        out = alpha_blend(layer, out)
    return out
