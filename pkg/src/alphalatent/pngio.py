"""PNG load/save for straight-alpha RGBA images.

On disk: 8-bit RGBA, straight (non-premultiplied) alpha. Byte b maps to
2*(b/255) - 1 for RGB and b/255 for alpha; the writer inverts exactly with
round-half-away-from-zero, so byte -> float -> byte round-trips losslessly.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .pixels import TransparentImage


def _float_to_byte(unit: np.ndarray) -> np.ndarray:
    # inputs in [0, 1]; half-away-from-zero == half-up for non-negative values
    x = np.clip(unit.astype(np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8)


def rgb_to_bytes(rgb: np.ndarray) -> np.ndarray:
    return _float_to_byte((np.clip(rgb, -1.0, 1.0) + 1.0) / 2.0)


def alpha_to_bytes(alpha: np.ndarray) -> np.ndarray:
    return _float_to_byte(alpha)


def bytes_to_rgb(b: np.ndarray) -> np.ndarray:
    return (2.0 * (b.astype(np.float64) / 255.0) - 1.0).astype(np.float32)


def bytes_to_alpha(b: np.ndarray) -> np.ndarray:
    return (b.astype(np.float64) / 255.0).astype(np.float32)


def encode_png(img: TransparentImage) -> bytes:
    rgba = np.concatenate([rgb_to_bytes(img.rgb), alpha_to_bytes(img.alpha)], axis=2)
    buf = io.BytesIO()
    Image.fromarray(rgba, mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> TransparentImage:
    arr = np.asarray(Image.open(io.BytesIO(data)).convert("RGBA"))
    return TransparentImage(rgb=bytes_to_rgb(arr[:, :, :3]), alpha=bytes_to_alpha(arr[:, :, 3:4]))


def encode_rgb_png(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(rgb_to_bytes(rgb), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_rgb_png(data: bytes) -> np.ndarray:
    return bytes_to_rgb(np.asarray(Image.open(io.BytesIO(data)).convert("RGB")))


def save_rgba(path: str | Path, img: TransparentImage) -> None:
    Path(path).write_bytes(encode_png(img))


def load_rgba(path: str | Path) -> TransparentImage:
    return decode_png(Path(path).read_bytes())


def save_rgb(path: str | Path, rgb: np.ndarray) -> None:
    """Opaque RGB image, same [-1, 1] byte mapping."""
    Image.fromarray(rgb_to_bytes(rgb), mode="RGB").save(path, format="PNG")


def load_rgb(path: str | Path) -> np.ndarray:
    return bytes_to_rgb(np.asarray(Image.open(path).convert("RGB")))


def save_gray(path: str | Path, unit: np.ndarray) -> None:
    """Grayscale PNG from a (h, w) or (h, w, 1) array in [0, 1]."""
    arr = unit[:, :, 0] if unit.ndim == 3 else unit
    Image.fromarray(_float_to_byte(arr), mode="L").save(path, format="PNG")
