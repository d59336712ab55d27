"""Raster containers, file I/O and the shared pixel primitives.

Images are plain ``float64`` numpy arrays.  Manga rasters are 2-D ``(H, W)``
with 0 = black ink and 1 = white paper; multi-channel embeddings are stored
channels-first ``(C, H, W)``.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

RESAMPLE_FILTERS = ("area", "bicubic", "nearest")


class ImageIOError(OSError):
    """Raised when a raster cannot be read or written."""


def as_image(data) -> np.ndarray:
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D raster, got shape {img.shape}")
    return img


def gaussian_kernel1d(kernel_size: int, sigma: float) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = kernel_size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_kernel2d(kernel_size: int, sigma: float) -> np.ndarray:
    k = gaussian_kernel1d(kernel_size, sigma)
    return np.outer(k, k)


def gaussian_blur(img, kernel_size: int = 11, sigma: float | None = None) -> np.ndarray:
    """Separable normalized Gaussian blur with reflect (mirror) borders.

    ``sigma`` defaults to ``kernel_size / 4``.  The border rule mirrors about
    the edge pixel without repeating it (``d c b | a b c d``), the same rule
    ``torch.nn.functional.pad(mode="reflect")`` uses, so the numpy and torch
    blurs agree to rounding.
    """
    img = np.asarray(img, dtype=np.float64)
    if sigma is None:
        sigma = kernel_size / 4.0
    k = gaussian_kernel1d(kernel_size, sigma)
    out = ndimage.correlate1d(img, k, axis=-2, mode="mirror")
    return ndimage.correlate1d(out, k, axis=-1, mode="mirror")


def area_matrix(n_in: int, n_out: int, ratio: float | None = None) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` box-integration matrix.

    Output sample ``j`` averages the input interval ``[j*r, (j+1)*r)``,
    weighting partially covered pixels by overlap.  ``r`` defaults to
    ``n_in / n_out``; an explicit ``ratio`` anchors the boxes at the origin,
    and a box running past the last input pixel averages what it covers.
    """
    r = n_in / n_out if ratio is None else float(ratio)
    if r <= 0:
        raise ValueError("ratio must be positive")
    lo = np.arange(n_out)[:, None] * r
    hi = lo + r
    i = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, i + 1) - np.maximum(lo, i), 0.0, None)
    cover = overlap.sum(axis=1, keepdims=True)
    if np.any(cover <= 0):
        raise ValueError(f"{n_out} boxes of width {r} overrun {n_in} input pixels")
    return overlap / cover


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int)
    return np.clip(idx, 0, n_in - 1)


def resample(img, target_h: int, target_w: int, filter: str = "area", clip: bool = True,
             ratio: float | None = None) -> np.ndarray:
    """Resize a 2-D raster to ``(target_h, target_w)``.

    ``area`` integrates box footprints exactly (fractional factors included),
    ``nearest`` picks the pixel under each target center, ``bicubic`` defers
    to Pillow's antialiased bicubic filter.  ``ratio`` (area only) fixes the
    input pixels per output pixel instead of deriving it from the sizes.
    Manga rasters are clipped back to [0, 1] unless ``clip`` is False.
    """
    img = as_image(img)
    target_h, target_w = int(target_h), int(target_w)
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be >= 1, got {(target_h, target_w)}")
    h, w = img.shape
    if ratio is not None and filter != "area":
        raise ValueError("an explicit ratio needs the area filter")
    if filter == "area":
        if (h, w) == (target_h, target_w) and ratio in (None, 1.0):
            out = img.copy()
        else:
            out = area_matrix(h, target_h, ratio) @ img @ area_matrix(w, target_w, ratio).T
    elif filter == "nearest":
        out = img[np.ix_(_nearest_index(h, target_h), _nearest_index(w, target_w))]
    elif filter == "bicubic":
        pil = PILImage.fromarray(img.astype(np.float32))
        out = np.asarray(pil.resize((target_w, target_h), PILImage.BICUBIC), dtype=np.float64)
    else:
        raise ValueError(f"unknown filter {filter!r}; expected one of {RESAMPLE_FILTERS}")
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out


def binarize(img, threshold: float = 0.5) -> np.ndarray:
    """1 where ``img >= threshold`` else 0, as ``uint8``."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("binarize expects a single-channel raster")
    return (img >= threshold).astype(np.uint8)


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Read PNG/JPEG as a grayscale raster in [0, 1] (luminance for color)."""
    path = Path(path)
    try:
        with PILImage.open(path) as pil:
            arr = np.asarray(pil.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise ImageIOError(f"cannot read image {path}: {e}") from e
    return arr / 255.0


def save_image(img, path, quality: int = 95) -> None:
    """Write an 8-bit grayscale raster; the format follows the file suffix."""
    path = Path(path)
    fmt = {".png": "PNG", ".jpg": "JPEG", ".jpeg": "JPEG"}.get(path.suffix.lower())
    if fmt is None:
        raise ImageIOError(f"unsupported image format {path.suffix!r} (use .png or .jpg)")
    pil = PILImage.fromarray(to_uint8(as_image(img)))
    kwargs = {"quality": int(quality)} if fmt == "JPEG" else {}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pil.save(path, format=fmt, **kwargs)
    except OSError as e:
        raise ImageIOError(f"cannot write image {path}: {e}") from e


def jpeg_roundtrip(img, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(as_image(img))).save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with PILImage.open(buf) as pil:
        return np.asarray(pil.convert("L"), dtype=np.float64) / 255.0
