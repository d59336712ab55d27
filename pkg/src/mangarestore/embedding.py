"""Handcrafted screentone embedding, SVAE distance and superpixels.

The embedding maps a manga raster to a smooth 4-channel per-pixel descriptor:

* channel 0 is the locally pooled intensity (standardized), which carries tone;
* channels 1-3 are the leading principal components of locally pooled Gabor
  magnitudes (8 orientations x 4 periods), which carry pattern type, period
  and orientation.

Gabor magnitudes ignore the phase of a periodic screen, so translating a
screentone barely moves its embedding.  The projection constants are fitted
once over :func:`screentone.screentone_bank` and shipped as a JSON asset;
``mangarestore embed-fit`` regenerates it.
"""

from __future__ import annotations

import json
import math
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .imaging import as_image
from .screentone import render_screentone, screentone_bank

ASSET_VERSION = 1
GABOR_PERIODS = (2.5, 4.0, 6.5, 10.0)
N_ORIENTATIONS = 8
POOL_SIZE = 24  # 2x the largest screen period; whole periods for 2, 3, 4, 6, 8, 12
N_PATTERN_COMPONENTS = 3
# superpixels want sharper region borders than the loss/metric smoothing window
SUPERPIXEL_POOL_SIZE = 16


def mirror_index(n: int, pad: int) -> torch.Tensor:
    """Source indices for mirror padding (``d c b | a b c d``) of any width."""
    idx = torch.arange(-pad, n + pad)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = idx.remainder(period)
    return torch.where(idx >= n, period - idx, idx)


def mirror_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    """Mirror-pad the last two dims; unlike ``F.pad`` the pad may exceed the size."""
    if pad == 0:
        return x
    iy = mirror_index(x.shape[-2], pad).to(x.device)
    ix = mirror_index(x.shape[-1], pad).to(x.device)
    return x.index_select(-2, iy).index_select(-1, ix)


def box_pool(x: torch.Tensor, size: int = POOL_SIZE) -> torch.Tensor:
    """Stride-1 box average with mirror borders; output keeps the input size.

    Even windows cover ``[i - size/2, i + size/2)``.
    """
    h, w = x.shape[-2:]
    xp = mirror_pad(x, size // 2)
    # separable running sums
    c = torch.nn.functional.pad(xp.cumsum(-1), (1, 0))
    x1 = (c[..., size:] - c[..., :-size])[..., :w] / size
    c = torch.nn.functional.pad(x1.cumsum(-2), (0, 0, 1, 0))
    return (c[..., size:, :] - c[..., :-size, :])[..., :h, :] / size


def gabor_kernels(dtype=torch.float64) -> tuple[torch.Tensor, int]:
    """Complex Gabor bank, shape ``(n_filters, k, k)``, real parts zero-mean."""
    radius = int(math.ceil(1.5 * max(GABOR_PERIODS)))
    ax = torch.arange(-radius, radius + 1, dtype=torch.float64)
    yy, xx = torch.meshgrid(ax, ax, indexing="ij")
    kernels = []
    for period in GABOR_PERIODS:
        sigma = 0.5 * period
        env = torch.exp(-(xx**2 + yy**2) / (2 * sigma**2))
        env = env / env.sum()
        for k in range(N_ORIENTATIONS):
            th = math.pi * k / N_ORIENTATIONS
            phase = 2 * math.pi / period * (xx * math.cos(th) + yy * math.sin(th))
            re = env * torch.cos(phase)
            re = re - env * (re.sum() / env.sum())
            im = env * torch.sin(phase)
            kernels.append(torch.complex(re, im))
    return torch.stack(kernels).to(torch.complex128 if dtype == torch.float64 else torch.complex64), radius


@lru_cache(maxsize=32)
def _kernel_spectrum(h: int, w: int, dtype: torch.dtype) -> tuple[torch.Tensor, int]:
    kernels, radius = gabor_kernels(dtype)
    k = kernels.shape[-1]
    hp, wp = h + 2 * radius, w + 2 * radius
    canvas = torch.zeros((kernels.shape[0], hp, wp), dtype=kernels.dtype)
    canvas[:, :k, :k] = kernels
    # move the kernel center to the origin for circular convolution
    canvas = torch.roll(canvas, shifts=(-radius, -radius), dims=(-2, -1))
    return torch.fft.fft2(canvas), radius


def gabor_magnitudes(x: torch.Tensor) -> torch.Tensor:
    """``(B, 1, H, W)`` -> ``(B, 32, H, W)`` Gabor response magnitudes."""
    h, w = x.shape[-2:]
    spec, radius = _kernel_spectrum(h, w, x.dtype)
    xp = mirror_pad(x, radius)
    resp = torch.fft.ifft2(torch.fft.fft2(xp) * spec)
    resp = resp[..., radius:radius + h, radius:radius + w]
    power = resp.real**2 + resp.imag**2
    return torch.sqrt(power + 1e-12)


def raw_features(x: torch.Tensor, pool_size: int = POOL_SIZE) -> tuple[torch.Tensor, torch.Tensor]:
    """Pooled intensity ``(B,1,H,W)`` and pooled Gabor magnitudes ``(B,32,H,W)``."""
    return box_pool(x, pool_size), box_pool(gabor_magnitudes(x), pool_size)


class ScreenEmbedder:
    """Applies the fitted projection; callable on ``(B, 1, H, W)`` tensors."""

    def __init__(self, asset: dict):
        if asset.get("version") != ASSET_VERSION:
            raise ValueError(f"unsupported embedding asset version {asset.get('version')}")
        self.asset = asset
        self.tone_mean = float(asset["tone_mean"])
        self.tone_std = float(asset["tone_std"])
        self.feat_mean = torch.tensor(asset["feat_mean"], dtype=torch.float64)
        self.feat_std = torch.tensor(asset["feat_std"], dtype=torch.float64)
        self.components = torch.tensor(asset["components"], dtype=torch.float64)
        self.svae_scale = float(asset["svae_scale"])

    def __call__(self, x: torch.Tensor, pool_size: int = POOL_SIZE) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W), got {tuple(x.shape)}")
        tone, gab = raw_features(x, pool_size)
        mean = self.feat_mean.to(x.dtype).view(1, -1, 1, 1)
        std = self.feat_std.to(x.dtype).view(1, -1, 1, 1)
        z = (gab - mean) / std
        pcs = torch.einsum("kc,bchw->bkhw", self.components.to(x.dtype), z)
        t = (tone - self.tone_mean) / self.tone_std
        return torch.cat([t, pcs], dim=1)

    def embed(self, img, pool_size: int = POOL_SIZE) -> np.ndarray:
        x = torch.from_numpy(as_image(img)).view(1, 1, *np.shape(img))
        with torch.no_grad():
            return self(x, pool_size)[0].numpy()


def _bank_renders(size: int):
    for spec in screentone_bank():
        yield spec, render_screentone(spec, size, size)


def fit_projection(size: int = 96, pixels_per_spec: int = 64, seed: int = 0) -> dict:
    """Fit standardization and PCA over the screentone bank; returns the asset dict."""
    rng = np.random.default_rng(seed)
    margin = POOL_SIZE // 2 + int(math.ceil(1.5 * max(GABOR_PERIODS)))
    tones, feats, means_gab, means_tone = [], [], [], []
    for _, img in _bank_renders(size):
        x = torch.from_numpy(img).view(1, 1, size, size)
        with torch.no_grad():
            t, g = raw_features(x)
        t = t[0, 0, margin:-margin, margin:-margin].numpy().ravel()
        g = g[0, :, margin:-margin, margin:-margin].numpy().reshape(g.shape[1], -1).T
        pick = rng.choice(t.size, size=min(pixels_per_spec, t.size), replace=False)
        tones.append(t[pick])
        feats.append(g[pick])
        means_gab.append(g.mean(0))
        means_tone.append(t.mean())
    tones = np.concatenate(tones)
    feats = np.concatenate(feats)
    feat_mean = feats.mean(0)
    feat_std = feats.std(0) + 1e-8
    z = (feats - feat_mean) / feat_std
    _, _, vt = np.linalg.svd(z - z.mean(0), full_matrices=False)
    comps = vt[:N_PATTERN_COMPONENTS]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(1)])
    comps = comps * signs[:, None]
    asset = {
        "version": ASSET_VERSION,
        "gabor_periods": list(GABOR_PERIODS),
        "n_orientations": N_ORIENTATIONS,
        "pool_size": POOL_SIZE,
        "tone_mean": float(tones.mean()),
        "tone_std": float(tones.std() + 1e-8),
        "feat_mean": feat_mean.tolist(),
        "feat_std": feat_std.tolist(),
        "components": comps.tolist(),
        "svae_scale": 1.0,
    }
    # normalization: RMS pairwise distance between the bank's mean embeddings
    m_tone = (np.array(means_tone) - asset["tone_mean"]) / asset["tone_std"]
    m_pcs = ((np.array(means_gab) - feat_mean) / feat_std) @ comps.T
    centers = np.column_stack([m_tone, m_pcs])
    d2 = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    n = len(centers)
    asset["svae_scale"] = float(np.sqrt(d2.sum() / (n * (n - 1))))
    return asset


def save_asset(asset: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(asset, indent=1))
    tmp.replace(path)


def load_asset(path=None) -> dict:
    if path is None:
        text = resources.files("mangarestore").joinpath("assets/embedding.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


@lru_cache(maxsize=1)
def default_embedder() -> ScreenEmbedder:
    return ScreenEmbedder(load_asset())


def embed(img) -> np.ndarray:
    """Screen map of a 2-D raster, shape ``(4, H, W)``."""
    return default_embedder().embed(img)


def embed_torch(x: torch.Tensor) -> torch.Tensor:
    return default_embedder()(x)


def svae_distance(a, b, mask=None) -> float:
    """Mean per-pixel L2 distance between screen maps, in bank-normalized units."""
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    emb = default_embedder()
    d = np.sqrt(((emb.embed(a) - emb.embed(b)) ** 2).sum(0)) / emb.svae_scale
    if mask is None:
        return float(d.mean())
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    return float(d[mask].mean())


def relabel(labels) -> np.ndarray:
    """Map arbitrary integer labels onto 0..N-1 preserving their order."""
    _, inv = np.unique(np.asarray(labels), return_inverse=True)
    return inv.reshape(np.shape(labels)).astype(np.int32)


def superpixels(gt, labels=None, target_n: int = 64, compactness: float = 0.02) -> np.ndarray:
    """Partition ``gt`` into superpixels, returning a ``0..N-1`` label raster.

    Known synthesis labels are passed through (nearest-resized to ``gt``);
    otherwise SLIC clusters the screen map together with pixel coordinates.
    The SLIC features use the fitted projection over a finer pooling window
    than the screen map itself, so cluster borders hug screentone borders.
    """
    gt = as_image(gt)
    h, w = gt.shape
    if labels is not None:
        labels = np.asarray(labels)
        lh, lw = labels.shape
        iy = np.clip(np.floor((np.arange(h) + 0.5) * lh / h).astype(int), 0, lh - 1)
        ix = np.clip(np.floor((np.arange(w) + 0.5) * lw / w).astype(int), 0, lw - 1)
        return relabel(labels[np.ix_(iy, ix)])
    from skimage.segmentation import slic

    feat = np.moveaxis(default_embedder().embed(gt, SUPERPIXEL_POOL_SIZE), 0, -1)
    seg = slic(
        feat,
        n_segments=target_n,
        compactness=compactness,
        channel_axis=-1,
        convert2lab=False,
        enforce_connectivity=True,
        # the skimage default (0.5) merges boundary slivers into straddling segments
        min_size_factor=0.02,
        start_label=0,
    )
    return relabel(seg)
