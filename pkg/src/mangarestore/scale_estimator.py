"""Scale estimation network: predicts the restorative upscale factor of a page.

Four stride-2 downsample modules, each followed by CBAM attention, feed a
global-pool + fully-connected head whose output is squashed into
``[s_min, s_max]``.  Per-patch confidence for spatial voting is the mean of
the last spatial-attention map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import as_image


@dataclass
class SENetConfig:
    n_downsample: int = 4
    base_channels: int = 32
    cbam_reduction: int = 8
    s_min: float = 1.0
    s_max: float = 4.0
    use_cbam: bool = True

    def __post_init__(self):
        if self.n_downsample < 1:
            raise ValueError("n_downsample must be >= 1")
        if not 1.0 <= self.s_min < self.s_max:
            raise ValueError(f"need 1 <= s_min < s_max, got {self.s_min}, {self.s_max}")

    def to_dict(self):
        return asdict(self)

    @property
    def min_side(self) -> int:
        return 2**self.n_downsample


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=8):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
        )

    def forward(self, x):
        avg = self.mlp(x.mean(dim=(2, 3)))
        mx = self.mlp(x.amax(dim=(2, 3)))
        return torch.sigmoid(avg + mx)[:, :, None, None]


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    """Channel attention followed by spatial attention."""

    def __init__(self, channels, reduction=8):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention()

    def forward(self, x):
        x = x * self.channel(x)
        sa = self.spatial(x)
        return x * sa, sa


class DownModule(nn.Module):
    def __init__(self, c_in, c_out, reduction=8, use_cbam=True):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.cbam = CBAM(c_out, reduction) if use_cbam else None

    def forward(self, x):
        x = self.body(x)
        if self.cbam is None:
            return x, torch.ones_like(x[:, :1])
        return self.cbam(x)


class SENet(nn.Module):
    def __init__(self, config: SENetConfig | None = None):
        super().__init__()
        self.config = config or SENetConfig()
        c = self.config.base_channels
        self.stem = nn.Sequential(nn.Conv2d(1, c, 3, padding=1), nn.ReLU(inplace=True))
        chans = [c] + [min(c * 2**i, 4 * c) for i in range(1, self.config.n_downsample + 1)]
        self.downs = nn.ModuleList(
            DownModule(chans[i], chans[i + 1], self.config.cbam_reduction, self.config.use_cbam)
            for i in range(self.config.n_downsample)
        )
        self.fc = nn.Linear(chans[-1], 1)

    def forward(self, x, return_confidence=False):
        """``x``: ``(B, 1, H, W)`` in [0, 1].  Returns ``s_y`` of shape ``(B,)``."""
        if x.shape[-1] < self.config.min_side or x.shape[-2] < self.config.min_side:
            raise ValueError(f"input {tuple(x.shape[-2:])} smaller than {self.config.min_side}px")
        f = self.stem(x - 0.5)
        sa = None
        for down in self.downs:
            f, sa = down(f)
        logit = self.fc(f.mean(dim=(2, 3))).squeeze(-1)
        cfg = self.config
        s = cfg.s_min + (cfg.s_max - cfg.s_min) * torch.sigmoid(logit)
        if return_confidence:
            return s, sa.mean(dim=(1, 2, 3))
        return s


def he_init(module: nn.Module) -> None:
    """Variance-scaled (He) normal init for conv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _image_tensor(img, dtype=torch.float32) -> torch.Tensor:
    arr = as_image(img)
    return torch.as_tensor(arr, dtype=dtype).view(1, 1, *arr.shape)


def se_forward(model: SENet, img) -> float:
    """Predicted scale for a whole raster."""
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        return float(model(_image_tensor(img, dtype))[0])


# -- losses ----------------------------------------------------------------


def scale_loss(s_y, s_gt) -> torch.Tensor:
    """Mean absolute scale error."""
    s_y = torch.as_tensor(s_y, dtype=torch.float64) if not torch.is_tensor(s_y) else s_y
    s_gt = torch.as_tensor(s_gt, dtype=s_y.dtype)
    return (s_y - s_gt).abs().mean()


def consistency_loss(patch_scales) -> torch.Tensor:
    """Mean deviation of per-patch scales from their image mean.

    ``patch_scales`` is ``(M,)`` for one image or ``(B, M)`` for a batch of
    images with ``M`` patches each; the batch is averaged.
    """
    p = torch.as_tensor(patch_scales, dtype=torch.float64) if not torch.is_tensor(patch_scales) else patch_scales
    if p.shape[-1] < 2:
        raise ValueError("consistency loss needs at least two patches per image")
    return (p - p.mean(dim=-1, keepdim=True)).abs().mean()


def se_total_loss(s_y, s_gt, patch_scales, alpha: float = 0.1) -> torch.Tensor:
    """Scale loss plus ``alpha`` x consistency; consistency only when ``s_gt`` is None."""
    cons = consistency_loss(patch_scales)
    if s_gt is None:
        return alpha * cons
    return scale_loss(s_y, s_gt) + alpha * cons


# -- voting ----------------------------------------------------------------


@dataclass
class PatchVote:
    origin: tuple[int, int]
    scale: float
    confidence: float


@dataclass
class ScaleEstimate:
    scale: float
    per_patch: list[PatchVote] = field(default_factory=list)


def vote(scales, confidences, tie_tol: float = 1e-3) -> float:
    """Confidence-weighted mean; the median when confidences are all (nearly) equal."""
    scales = np.asarray(scales, dtype=np.float64)
    conf = np.asarray(confidences, dtype=np.float64)
    if scales.size == 0:
        raise ValueError("no votes")
    if conf.max() - conf.min() <= tie_tol or conf.sum() <= 0:
        return float(np.median(scales))
    return float((conf * scales).sum() / conf.sum())


def patch_origins(h, w, n_patches, patch_size, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Jittered grid of ``n_patches`` top-left corners covering the raster."""
    rows = max(int(np.floor(np.sqrt(n_patches))), 1)
    cols = int(np.ceil(n_patches / rows))
    span_y, span_x = h - patch_size, w - patch_size
    origins = []
    for i in range(n_patches):
        r, c = divmod(i, cols)
        cy = span_y * (r + 0.5) / rows
        cx = span_x * (c + 0.5) / cols
        jy = rng.uniform(-0.25, 0.25) * span_y / rows
        jx = rng.uniform(-0.25, 0.25) * span_x / cols
        origins.append((int(np.clip(round(cy + jy), 0, span_y)), int(np.clip(round(cx + jx), 0, span_x))))
    return origins


def estimate_scale_voted(model: SENet, img, n_patches: int = 4, patch_size: int = 128, rng_seed: int = 0) -> ScaleEstimate:
    """Run the network on a jittered grid of patches and vote by attention confidence."""
    arr = as_image(img)
    h, w = arr.shape
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {arr.shape} smaller than patch size {patch_size}")
    origins = patch_origins(h, w, n_patches, patch_size, np.random.default_rng(rng_seed))
    dtype = next(model.parameters()).dtype
    batch = torch.stack(
        [torch.as_tensor(arr[y:y + patch_size, x:x + patch_size], dtype=dtype) for y, x in origins]
    )[:, None]
    model.eval()
    with torch.no_grad():
        s, conf = model(batch, return_confidence=True)
    s, conf = s.double().numpy(), conf.double().numpy()
    votes = [PatchVote(o, float(a), float(c)) for o, a, c in zip(origins, s, conf)]
    return ScaleEstimate(scale=vote(s, conf), per_patch=votes)
