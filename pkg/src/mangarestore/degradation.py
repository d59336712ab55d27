"""Synthetic degradation: blur, downscale, additive noise, JPEG round-trip."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .imaging import as_image, gaussian_blur, jpeg_roundtrip, resample

MIN_OUTPUT_SIDE = 8


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class DegradationParams:
    scale: float = 1.0
    blur_kernel_size: int = 5
    blur_sigma: float = 0.0
    jpeg_quality: int | None = None
    noise_sigma: float = 0.0  # 8-bit units

    def __post_init__(self):
        if not self.scale >= 1.0:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        if self.blur_kernel_size < 1 or self.blur_kernel_size % 2 == 0:
            raise ValueError(f"blur_kernel_size must be odd, got {self.blur_kernel_size}")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if self.jpeg_quality is not None and not 1 <= self.jpeg_quality <= 100:
            raise ValueError(f"jpeg_quality out of range: {self.jpeg_quality}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationParams":
        q = d.get("jpeg_quality")
        return cls(
            scale=float(d["scale"]),
            blur_kernel_size=int(d.get("blur_kernel_size", 5)),
            blur_sigma=float(d.get("blur_sigma", 0.0)),
            jpeg_quality=None if q is None else int(q),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
        )


def degraded_size(h: int, w: int, scale: float) -> tuple[int, int]:
    return round_half_up(h / scale), round_half_up(w / scale)


def degrade(gt, p: DegradationParams, rng_seed: int = 0, filter: str = "area") -> np.ndarray:
    """Blur -> downsample by ``p.scale`` -> Gaussian noise -> JPEG, clamped to [0, 1]."""
    img = as_image(gt)
    out_h, out_w = degraded_size(*img.shape, p.scale)
    if out_h < MIN_OUTPUT_SIDE or out_w < MIN_OUTPUT_SIDE:
        raise ValueError(
            f"scale {p.scale} shrinks {img.shape} to {(out_h, out_w)}, below {MIN_OUTPUT_SIDE}x{MIN_OUTPUT_SIDE}"
        )
    if p.blur_sigma > 0:
        img = gaussian_blur(img, p.blur_kernel_size, p.blur_sigma)
    # area boxes are exactly ``scale`` pixels wide, anchored at the origin
    img = resample(img, out_h, out_w, filter=filter, ratio=p.scale if filter == "area" else None)
    if p.noise_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        img = np.clip(img + rng.normal(0.0, p.noise_sigma / 255.0, img.shape), 0.0, 1.0)
    if p.jpeg_quality is not None:
        img = jpeg_roundtrip(img, p.jpeg_quality)
    return img


def sample_params(
    rng_seed: int,
    scale_range: tuple[float, float] = (1.0, 4.0),
    quality_range: tuple[int, int] = (50, 100),
    noise_range: tuple[float, float] = (5.0, 15.0),
    blur_sigma_range: tuple[float, float] = (0.5, 1.5),
    p_blur: float = 0.5,
    p_jpeg: float = 0.5,
    p_noise: float = 0.5,
) -> DegradationParams:
    """Draw one random degradation; each optional stage fires independently."""
    rng = np.random.default_rng(rng_seed)
    scale = float(rng.uniform(*scale_range))
    # draw every variate unconditionally so the stream layout is fixed
    blur_on, jpeg_on, noise_on = rng.random(3) < (p_blur, p_jpeg, p_noise)
    sigma = float(rng.uniform(*blur_sigma_range))
    quality = int(rng.integers(quality_range[0], quality_range[1] + 1))
    noise = float(rng.uniform(*noise_range))
    return DegradationParams(
        scale=scale,
        blur_kernel_size=5,
        blur_sigma=sigma if blur_on else 0.0,
        jpeg_quality=quality if jpeg_on else None,
        noise_sigma=noise if noise_on else 0.0,
    )
