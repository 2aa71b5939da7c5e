"""Pixel-level operations: decoding, bilinear resize, and geometric warps.

Arrays are float, scaled to [0, 1]. Grayscale files decode to 2-D grids,
color files to (H, W, 3). Sampling uses half-pixel centers: output pixel
``i`` reads source coordinate ``(i + 0.5) * scale - 0.5``. Coordinates
outside the source are clamped to the nearest edge pixel, which is what
fills vacated regions after a shift or rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ImageIOError


@dataclass(frozen=True)
class AugmentationSpec:
    """Random shift/rotation magnitudes applied to training images."""

    shift_fraction: float = 0.10
    rotation_degrees: float = 10.0
    fill_mode: str = "nearest"

    def __post_init__(self):
        if not 0.0 <= self.shift_fraction < 1.0:
            raise ValueError(f"shift_fraction must be in [0, 1), got {self.shift_fraction}")
        if not 0.0 <= self.rotation_degrees <= 180.0:
            raise ValueError(
                f"rotation_degrees must be in [0, 180], got {self.rotation_degrees}"
            )
        if self.fill_mode != "nearest":
            raise ValueError(f"unsupported fill_mode {self.fill_mode!r}")


def read_pixels(path: str | Path) -> np.ndarray:
    """Decode an 8/16-bit grayscale or RGB file to float32 in [0, 1].

    Returns (H, W) for grayscale sources and (H, W, 3) for color ones.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            mode = img.mode
            if mode in ("I;16", "I;16L", "I;16B"):
                arr = np.asarray(img, dtype=np.uint16).astype(np.float32) / 65535.0
            elif mode == "I":
                arr = np.asarray(img, dtype=np.int32).astype(np.float32) / 65535.0
            elif mode in ("L", "1"):
                arr = np.asarray(img.convert("L"), dtype=np.uint8).astype(np.float32) / 255.0
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.uint8).astype(np.float32) / 255.0
    except ImageIOError:
        raise
    except Exception as err:
        raise ImageIOError(f"cannot decode {path}: {err}") from err
    if arr.ndim not in (2, 3) or arr.size == 0:
        raise ImageIOError(f"{path}: decoded to unusable shape {arr.shape}")
    return arr


def save_pixels(pixels: np.ndarray, path: str | Path) -> Path:
    """Write a [0, 1] float array as an 8-bit PNG (grayscale or RGB)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    q = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if q.ndim == 2:
        Image.fromarray(q, mode="L").save(path, format="PNG")
    elif q.ndim == 3 and q.shape[2] == 3:
        Image.fromarray(q, mode="RGB").save(path, format="PNG")
    else:
        raise ValueError(f"cannot save array of shape {pixels.shape} as an image")
    return path


def load_image(path: str | Path) -> np.ndarray:
    """Load an image as (H, W, 3) float32; grayscale is replicated to 3 channels."""
    arr = read_pixels(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr


def load_mask(path: str | Path) -> np.ndarray:
    """Load a binary mask as (H, W) float32 in {0, 1}."""
    arr = read_pixels(path)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return (arr > 0.5).astype(np.float32)


def _sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray, interp: str) -> np.ndarray:
    """Gather ``image`` at fractional (rows, cols), clamping to the edges."""
    h, w = image.shape[:2]
    rows = np.clip(rows, 0.0, float(h - 1))
    cols = np.clip(cols, 0.0, float(w - 1))
    if interp == "nearest":
        r = np.rint(rows).astype(np.intp)
        c = np.rint(cols).astype(np.intp)
        return image[r, c]
    if interp != "bilinear":
        raise ValueError(f"unknown interpolation {interp!r}")
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = rows - r0
    wc = cols - c0
    if image.ndim == 3:
        wr = wr[..., None]
        wc = wc[..., None]
    top = image[r0, c0] * (1.0 - wc) + image[r0, c1] * wc
    bot = image[r1, c0] * (1.0 - wc) + image[r1, c1] * wc
    return top * (1.0 - wr) + bot * wr


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly resample ``image`` to (height, width).

    Resizing to the current size reproduces the input exactly: the source
    coordinates land on integer pixels and the interpolation weights
    collapse to 0/1.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"resize target must be positive, got ({height}, {width})")
    image = np.asarray(image)
    if image.size == 0 or image.ndim not in (2, 3):
        raise ValueError(f"cannot resize array of shape {image.shape}")
    h, w = image.shape[:2]
    rows = (np.arange(height, dtype=np.float64) + 0.5) * (h / height) - 0.5
    cols = (np.arange(width, dtype=np.float64) + 0.5) * (w / width) - 0.5
    out = _sample(image, rows[:, None], cols[None, :], "bilinear")
    return out.astype(image.dtype, copy=False)


def shift_rotate(
    image: np.ndarray,
    dx: float,
    dy: float,
    theta_degrees: float,
    interp: str = "bilinear",
) -> np.ndarray:
    """Rotate by ``theta_degrees`` about the center, then shift by (dx, dy).

    Positive ``dx`` moves content right, positive ``dy`` moves it down,
    both in pixels. Vacated pixels replicate the nearest edge.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    t = math.radians(theta_degrees)
    cos_t, sin_t = math.cos(t), math.sin(t)
    rr, cc = np.meshgrid(
        np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij"
    )
    vr = rr - cy - dy
    vc = cc - cx - dx
    src_r = cos_t * vr + sin_t * vc + cy
    src_c = -sin_t * vr + cos_t * vc + cx
    out = _sample(image, src_r, src_c, interp)
    return out.astype(image.dtype, copy=False)


def draw_shift_rotation(
    shape: tuple[int, int], spec: AugmentationSpec, rng: np.random.Generator
) -> tuple[float, float, float]:
    """Draw (dx, dy, theta) for one augmentation, in a fixed order."""
    h, w = shape[0], shape[1]
    dx = float(rng.uniform(-spec.shift_fraction * w, spec.shift_fraction * w))
    dy = float(rng.uniform(-spec.shift_fraction * h, spec.shift_fraction * h))
    theta = float(rng.uniform(-spec.rotation_degrees, spec.rotation_degrees))
    return dx, dy, theta


def augment_image(
    image: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator
) -> np.ndarray:
    """Apply one random shift/rotation drawn from ``rng``.

    A zero-magnitude spec is the identity on pixel values, and a given
    generator state always yields the same output.
    """
    image = np.asarray(image)
    dx, dy, theta = draw_shift_rotation(image.shape, spec, rng)
    return shift_rotate(image, dx, dy, theta, interp="bilinear")
