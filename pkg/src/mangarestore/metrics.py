"""Evaluation: masked PSNR/SSIM/SVAE, the identifiability mask and scale accuracy."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .embedding import svae_distance
from .imaging import as_image
from .screentone import LINE_LABEL, ScreentoneSpec

PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5 -> 11x11 window
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2
SCALE_BUCKETS = (("[1,2]", 1.0, 2.0, True), ("(2,3]", 2.0, 3.0, False), ("(3,4]", 3.0, 4.0, False),
                 ("[1,4]", 1.0, 4.0, True))
REL_ERR_THRESHOLD = 0.02


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} != image shape {shape}")
    if not mask.any():
        raise ValueError("empty mask")
    return mask


def _pair(a, b):
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, mask=None) -> float:
    """Peak signal-to-noise ratio for unit dynamic range, capped at 100 dB."""
    a, b = _pair(a, b)
    m = _mask(mask, a.shape)
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel SSIM with a Gaussian window and mirrored borders."""
    a, b = _pair(a, b)

    def f(x):
        return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="mirror")

    mu_a, mu_b = f(a), f(b)
    var_a = f(a * a) - mu_a**2
    var_b = f(b * b) - mu_b**2
    cov = f(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b, mask=None) -> float:
    a, b = _pair(a, b)
    m = _mask(mask, a.shape)
    return float(ssim_map(a, b)[m].mean())


def is_identifiable(spec: ScreentoneSpec, s_gt: float) -> bool:
    """Nyquist test: the fundamental survives a ``1/s_gt`` downscale (strictly)."""
    if spec.kind == "stochastic":
        return s_gt <= 2.0
    return 1.0 / spec.period < 0.5 / s_gt


def identifiability_mask(region_labels, specs, s_gt: float) -> np.ndarray:
    """Boolean raster of pixels in identifiable regions; line art always counts.

    ``specs[i]`` describes label ``i + 1``.
    """
    labels = np.asarray(region_labels)
    n = len(specs)
    if labels.max() > n or labels.min() < 0:
        raise ValueError(f"label {labels.max()} has no screentone spec ({n} given)")
    keep = np.zeros(n + 1, dtype=bool)
    keep[LINE_LABEL] = True
    for i, spec in enumerate(specs):
        if isinstance(spec, dict):
            spec = ScreentoneSpec.from_dict(spec)
        keep[i + 1] = is_identifiable(spec, s_gt)
    return keep[labels]


# -- scale estimation ------------------------------------------------------


@dataclass
class BucketStats:
    n: int
    mean_rel_error: float
    accuracy: float
    frac_below: float


@dataclass
class ScaleEvalReport:
    buckets: dict[str, BucketStats | None]
    per_volume: dict[str, tuple[float, float]]
    histogram: tuple[list[int], list[float]] = field(default_factory=lambda: ([], []))

    @property
    def overall(self) -> BucketStats:
        return self.buckets["[1,4]"]

    def to_dict(self) -> dict:
        return {
            "buckets": {k: (asdict(v) if v else None) for k, v in self.buckets.items()},
            "per_volume": {k: {"mean": m, "std": s} for k, (m, s) in self.per_volume.items()},
            "histogram": {"counts": self.histogram[0], "edges": self.histogram[1]},
        }


def _bucket_stats(rel: np.ndarray) -> BucketStats | None:
    if rel.size == 0:
        return None
    mre = float(rel.mean())
    return BucketStats(int(rel.size), mre, float(np.clip(1.0 - mre, 0.0, 1.0)),
                       float((rel < REL_ERR_THRESHOLD).mean()))


def scale_eval(preds, gts, volume_ids=None, bins: int = 20) -> ScaleEvalReport:
    """Relative-error statistics per scale bucket and per-volume prediction spread."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.size == 0:
        raise ValueError("empty input")
    if preds.shape != gts.shape:
        raise ValueError("preds and gts differ in length")
    if np.any(gts <= 0):
        raise ValueError("ground-truth scales must be positive")
    rel = np.abs(preds - gts) / gts
    buckets = {}
    for name, lo, hi, closed_lo in SCALE_BUCKETS:
        sel = (gts >= lo if closed_lo else gts > lo) & (gts <= hi)
        buckets[name] = _bucket_stats(rel[sel])
    per_volume = {}
    if volume_ids is not None:
        vids = np.asarray(volume_ids)
        if vids.shape != preds.shape:
            raise ValueError("volume_ids differ in length")
        for v in dict.fromkeys(vids.tolist()):
            p = preds[vids == v]
            per_volume[str(v)] = (float(p.mean()), float(p.std()))
    counts, edges = np.histogram(rel, bins=bins, range=(0.0, max(float(rel.max()), REL_ERR_THRESHOLD)))
    return ScaleEvalReport(buckets, per_volume, (counts.tolist(), edges.tolist()))


# -- restoration -----------------------------------------------------------


@dataclass
class ImageScore:
    id: str
    psnr: float
    ssim: float
    svae: float
    coverage: float


@dataclass
class RestoreEvalReport:
    images: list[ImageScore]

    def aggregate(self) -> dict:
        if not self.images:
            return {"n": 0}
        cols = ("psnr", "ssim", "svae", "coverage")
        out = {"n": len(self.images)}
        out.update({c: float(np.mean([getattr(s, c) for s in self.images])) for c in cols})
        return out

    def to_dict(self) -> dict:
        return {"aggregate": self.aggregate(), "images": [asdict(s) for s in self.images]}


def score_image(rid: str, restored, gt, mask=None) -> ImageScore:
    restored, gt = _pair(restored, gt)
    m = _mask(mask, gt.shape)
    return ImageScore(rid, psnr(restored, gt, m), ssim(restored, gt, m), svae_distance(restored, gt, m),
                      float(m.mean()))


def restore_eval(pairs) -> RestoreEvalReport:
    """``pairs`` yields ``(id, restored, gt, mask)``; images with empty masks are skipped."""
    scores = []
    for rid, restored, gt, mask in pairs:
        if mask is not None and not np.asarray(mask).any():
            continue
        scores.append(score_image(rid, restored, gt, mask))
    return RestoreEvalReport(scores)


def within_superpixel_variance(phi: np.ndarray, labels, mask=None) -> float:
    """Mean over superpixels of the per-channel variance of ``phi`` (``(C,H,W)``)."""
    labels = np.asarray(labels)
    if mask is not None:
        labels = np.where(np.asarray(mask, bool), labels, -1)
    total, n = 0.0, 0
    for lab in np.unique(labels):
        if lab < 0:
            continue
        sel = labels == lab
        total += float(phi[:, sel].var(axis=1).sum())
        n += 1
    if n == 0:
        raise ValueError("no superpixels in mask")
    return total / n
