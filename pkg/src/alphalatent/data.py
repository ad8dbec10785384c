"""Procedural dataset generation: labeled transparent shapes and
foreground/background layer pairs with semi-transparent phenomena.

Every sample is fully determined by its SampleSpec (seed included) and is
quantized onto the 8-bit PNG grid so shard round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from . import pngio
from .pixels import TransparentImage, alpha_blend

SHAPE_FAMILIES = ("disk", "ring", "blob", "glyph", "glow")
BACKGROUND_FAMILIES = ("gradient", "stripes", "checker", "noise")
ALPHA_PROFILES = ("hard", "feathered", "radial-falloff")

# Condition vocabulary: 0 is the reserved null label.
VOCABULARY = ("null",) + SHAPE_FAMILIES + BACKGROUND_FAMILIES

_FAMILY_PROFILE = {
    "disk": "hard",
    "ring": "hard",
    "blob": "feathered",
    "glyph": "hard",
    "glow": "radial-falloff",
}


def label_id(name: str) -> int:
    return VOCABULARY.index(name)


def label_name(idx: int) -> str:
    return VOCABULARY[idx]


@dataclass(frozen=True)
class SampleSpec:
    family: str
    seed: int
    size: int = 64
    alpha_profile: str | None = None  # None -> family default
    fill_color: tuple[float, float, float] | None = None  # None -> seeded random
    radius_range: tuple[float, float] = (0.15, 0.35)  # fraction of size
    center_range: tuple[float, float] = (0.3, 0.7)  # fraction of size

    def __post_init__(self):
        if self.family not in SHAPE_FAMILIES:
            raise ValueError(f"unknown shape family {self.family!r}")
        if self.alpha_profile is not None and self.alpha_profile not in ALPHA_PROFILES:
            raise ValueError(f"unknown alpha profile {self.alpha_profile!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class LayerPair:
    """One multi-layer training sample; blended == alpha_blend(foreground, background)."""

    foreground: TransparentImage
    background: np.ndarray
    blended: np.ndarray
    labels: tuple[int, int, int]  # (foreground, full image, background)


def _quantize(img: TransparentImage) -> TransparentImage:
    return TransparentImage(
        rgb=pngio.bytes_to_rgb(pngio.rgb_to_bytes(img.rgb)),
        alpha=pngio.bytes_to_alpha(pngio.alpha_to_bytes(img.alpha)),
    )


def _quantize_rgb(rgb: np.ndarray) -> np.ndarray:
    return pngio.bytes_to_rgb(pngio.rgb_to_bytes(rgb))


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return xx, yy


def _box_sdf(xx, yy, cx, cy, half_w, half_h):
    return np.maximum(np.abs(xx - cx) - half_w, np.abs(yy - cy) - half_h)


def _shape_field(spec: SampleSpec, rng: np.random.Generator) -> np.ndarray:
    """Signed distance to the shape boundary (negative inside), in pixels."""
    size = spec.size
    xx, yy = _grid(size)
    lo, hi = spec.center_range
    cx, cy = rng.uniform(lo * size, hi * size, size=2)
    rlo, rhi = spec.radius_range
    radius = rng.uniform(rlo * size, rhi * size)

    if spec.family == "glow":
        # keep the soft halo fully on canvas so it always has a wide band
        cx, cy = rng.uniform(0.35 * size, 0.65 * size, size=2)
        radius = rng.uniform(0.20 * size, 0.35 * size)

    r = np.hypot(xx - cx, yy - cy)
    if spec.family in ("disk", "glow"):
        return r - radius
    if spec.family == "ring":
        thickness = radius * rng.uniform(0.25, 0.45)
        return np.abs(r - radius) - thickness / 2.0
    if spec.family == "blob":
        theta = np.arctan2(yy - cy, xx - cx)
        wobble = np.zeros_like(r)
        for k in (2, 3, 4):
            wobble += rng.uniform(0.0, 0.25 / k) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
        return r - radius * (1.0 + wobble)
    if spec.family == "glyph":
        n_bars = int(rng.integers(2, 5))
        d = np.full_like(r, np.inf)
        for _ in range(n_bars):
            bx, by = rng.uniform(lo * size, hi * size, size=2)
            length = rng.uniform(0.5, 1.2) * radius
            width = rng.uniform(0.12, 0.3) * radius
            if rng.random() < 0.5:
                d = np.minimum(d, _box_sdf(xx, yy, bx, by, length, width))
            else:
                d = np.minimum(d, _box_sdf(xx, yy, bx, by, width, length))
        return d
    raise AssertionError(spec.family)


def _profile_alpha(d: np.ndarray, profile: str, rng: np.random.Generator) -> np.ndarray:
    if profile == "hard":
        return (d <= 0.0).astype(np.float64)
    if profile == "feathered":
        feather = rng.uniform(1.5, 3.0)
        t = np.clip(-d / feather, 0.0, 1.0)
        return t * t * (3.0 - 2.0 * t)
    # radial-falloff: quadratic ease from the boundary to the deepest point
    depth = max(float((-d).max()), 1e-6)
    t = np.clip(-d / depth, 0.0, 1.0)
    return t * t


def _fill_color(spec: SampleSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.fill_color is not None:
        return np.asarray(spec.fill_color, dtype=np.float64)
    c = rng.uniform(-1.0, 1.0, size=3)
    if np.abs(c).max() < 0.25:  # avoid near-gray fills
        c = c * (0.25 / max(np.abs(c).max(), 1e-6))
    return c


def gen_transparent_sample(spec: SampleSpec) -> tuple[TransparentImage, int]:
    """Deterministic labeled transparent image; label is the shape family id."""
    rng = np.random.default_rng(spec.seed)
    d = _shape_field(spec, rng)
    profile = spec.alpha_profile or _FAMILY_PROFILE[spec.family]
    alpha = _profile_alpha(d, profile, rng)

    depth = max(float((-d).max()), 1e-6)
    t = np.clip(-d / depth, 0.0, 1.0)  # 0 at edge, 1 at deepest point
    color = _fill_color(spec, rng)
    rgb = np.zeros((spec.size, spec.size, 3), dtype=np.float64)
    support = alpha > 0.0
    shade = (0.7 + 0.3 * t)[:, :, None]
    body = np.clip(color[None, None, :] * shade, -1.0, 1.0)
    if spec.family == "glow":
        w = (0.6 * t * t)[:, :, None]  # bright core
        body = body * (1.0 - w) + 1.0 * w
    rgb[support] = body[support]

    img = _quantize(
        TransparentImage(
            rgb=rgb.astype(np.float32),
            alpha=alpha[:, :, None].astype(np.float32),
        )
    )
    return img, label_id(spec.family)


def background_region(alpha: np.ndarray, radius: int) -> np.ndarray:
    """Invert the alpha support mask and erode it `radius` pixels (3x3
    structuring element per step). Radius 0 returns the exact complement."""
    if radius < 0:
        raise ValueError("erosion radius must be >= 0")
    inverted = ~(alpha[:, :, 0] > 0.0)
    if radius == 0:
        return inverted
    # border_value=1: the canvas edge never counts as foreground
    return ndimage.binary_erosion(
        inverted, structure=np.ones((3, 3), dtype=bool), iterations=radius, border_value=1
    )


def _texture(family: str, size: int, rng: np.random.Generator) -> np.ndarray:
    xx, yy = _grid(size)
    c1 = rng.uniform(-1.0, 1.0, size=3)
    c2 = rng.uniform(-1.0, 1.0, size=3)
    if family == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        t = (np.cos(theta) * xx + np.sin(theta) * yy) / size
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    elif family == "stripes":
        theta = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(0.2, 0.8)
        t = 0.5 + 0.5 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi))
    elif family == "checker":
        cell = int(rng.integers(4, 17))
        t = (((xx // cell) + (yy // cell)) % 2).astype(np.float64)
    elif family == "noise":
        coarse = rng.uniform(0.0, 1.0, size=(8, 8))
        t = ndimage.zoom(coarse, size / 8.0, order=1, mode="nearest", grid_mode=True)
    else:
        raise AssertionError(family)
    return c1[None, None, :] * (1.0 - t[:, :, None]) + c2[None, None, :] * t[:, :, None]


def gen_layer_pair(spec: SampleSpec, erosion_radius: int = 2) -> LayerPair:
    """Foreground shape over a procedural background.

    The directly-visible background region is the eroded complement of the
    foreground support; under and near the foreground the texture is replaced
    by a re-seeded variant, echoing an inpainting fill, with a feathered seam.
    """
    foreground, fg_label = gen_transparent_sample(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x7A61]))
    size = spec.size
    bg_family = BACKGROUND_FAMILIES[int(rng.integers(0, len(BACKGROUND_FAMILIES)))]
    scene = _texture(bg_family, size, rng)
    fill = _texture(bg_family, size, rng)

    visible = background_region(foreground.alpha, erosion_radius).astype(np.float64)
    for _ in range(2):  # feather the seam a couple of pixels
        visible = ndimage.uniform_filter(visible, size=3, mode="nearest")
    w = visible[:, :, None]
    background = _quantize_rgb(np.clip(scene * w + fill * (1.0 - w), -1.0, 1.0).astype(np.float32))

    blended = alpha_blend(foreground, background)
    return LayerPair(
        foreground=foreground,
        background=background,
        blended=blended,
        labels=(fg_label, fg_label, label_id(bg_family)),
    )


def sample_specs(
    count: int,
    master_seed: int,
    size: int = 64,
    families: tuple[str, ...] = SHAPE_FAMILIES,
) -> list[SampleSpec]:
    """Balanced, reproducible spec list: one child seed per sample."""
    seeds = np.random.SeedSequence(master_seed).generate_state(count)
    return [
        SampleSpec(family=families[i % len(families)], seed=int(seeds[i]), size=size)
        for i in range(count)
    ]


def specs_digest(specs: list[SampleSpec]) -> str:
    h = hashlib.sha256()
    for s in specs:
        h.update(s.digest().encode())
    return h.hexdigest()
