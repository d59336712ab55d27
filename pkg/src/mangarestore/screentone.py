"""Parametric bitonal screentones and synthetic page composition.

Regular screens (dot, line, checker) threshold a rotated cosine carrier;
the stochastic screen grows one clustered dot per jittered lattice cell.  Every rendered
raster is strictly bitonal: 0 (black ink) or 1 (white paper).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

KINDS = ("dot", "line", "checker", "stochastic")
LINE_LABEL = 0
# sample offset keeps integer-period carriers off their zero crossings
_PHASE = 0.25
_REF_SIZE = 256


@dataclass(frozen=True)
class ScreentoneSpec:
    kind: str
    period: float
    angle: float = 0.0
    tone: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown screentone kind {self.kind!r}")
        if not self.period >= 2:
            raise ValueError(f"period must be >= 2 pixels, got {self.period}")
        if not 0.0 <= self.tone <= 1.0:
            raise ValueError(f"tone must lie in [0, 1], got {self.tone}")
        object.__setattr__(self, "angle", float(self.angle) % 180.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScreentoneSpec":
        return cls(
            kind=d["kind"],
            period=float(d["period"]),
            angle=float(d.get("angle", 0.0)),
            tone=float(d.get("tone", 0.5)),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class Region:
    mask: np.ndarray
    spec: ScreentoneSpec


@dataclass
class PageLayout:
    height: int
    width: int
    regions: list[Region] = field(default_factory=list)
    line_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.line_mask is None:
            self.line_mask = np.zeros((self.height, self.width), dtype=bool)

    @property
    def specs(self) -> list[ScreentoneSpec]:
        return [r.spec for r in self.regions]


def _spot(kind: str, period: float, angle: float, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Spot function on a pixel grid: ink where the value falls below a cut."""
    th = math.radians(angle)
    x = xs + _PHASE
    y = ys + _PHASE
    u = x * math.cos(th) + y * math.sin(th)
    v = -x * math.sin(th) + y * math.cos(th)
    w = 2.0 * math.pi / period
    if kind == "line":
        s = np.cos(w * u)
    elif kind == "dot":
        # negative so ink clusters around carrier maxima and grows outward
        s = -0.5 * (np.cos(w * u) + np.cos(w * v))
    elif kind == "checker":
        s = np.cos(w * u) * np.cos(w * v)
    else:
        raise ValueError(kind)
    # equal phases must compare equal, or ties get broken by rounding noise
    return np.round(s, 9)


def _closest_cut(values: np.ndarray, tone: float) -> float:
    """Threshold whose ink fraction on ``values`` is as close to ``tone`` as ties allow."""
    v = np.sort(values.ravel())
    n = v.size
    # candidate cuts sit between distinct neighbours; fraction below = index/n
    breaks = np.flatnonzero(np.diff(v) > 0) + 1
    idx = np.concatenate(([0], breaks, [n]))
    best = idx[np.argmin(np.abs(idx / n - tone))]
    if best == 0:
        return -np.inf
    if best == n:
        return np.inf
    return 0.5 * (v[best - 1] + v[best])


def _regular_threshold(spec: ScreentoneSpec) -> float:
    ys, xs = np.mgrid[0:_REF_SIZE, 0:_REF_SIZE].astype(np.float64)
    return _closest_cut(_spot(spec.kind, spec.period, spec.angle, ys, xs), spec.tone)


def _stochastic_screen(spec: ScreentoneSpec, h: int, w: int) -> np.ndarray:
    """Jittered-grid clustered screen: one dot per Voronoi cell of randomly
    displaced lattice sites, each cell inked to ``round(tone * area)`` pixels
    nearest its site.  Jittered sites give a blue-noise dot distribution.
    """
    from scipy.spatial import cKDTree

    p = spec.period
    rng = np.random.default_rng(spec.seed)
    gy, gx = np.mgrid[-1:int(math.ceil(h / p)) + 1, -1:int(math.ceil(w / p)) + 1]
    sites = np.column_stack([gy.ravel(), gx.ravel()]) * p + 0.5 * p
    sites = sites + rng.uniform(-0.35 * p, 0.35 * p, sites.shape)
    ys, xs = np.mgrid[0:h, 0:w]
    dist, cell = cKDTree(sites).query(np.column_stack([ys.ravel(), xs.ravel()]))
    # rank pixels by distance inside each cell
    order = np.lexsort((np.arange(cell.size), np.round(dist, 9), cell))
    cell_sorted = cell[order]
    starts = np.flatnonzero(np.r_[True, cell_sorted[1:] != cell_sorted[:-1]])
    sizes = np.diff(np.r_[starts, cell.size])
    rank = np.arange(cell.size) - np.repeat(starts, sizes)
    quota = np.repeat(np.floor(spec.tone * sizes + 0.5), sizes)
    ink = np.empty(cell.size, dtype=bool)
    ink[order] = rank < quota
    return np.where(ink.reshape(h, w), 0.0, 1.0)


def render_screentone(spec: ScreentoneSpec, h: int, w: int) -> np.ndarray:
    """Render ``spec`` on an ``h x w`` canvas anchored at the page origin.

    Regular screens use a size-independent threshold (fitted once on a fixed
    reference lattice), so renders of different sizes agree on their overlap.
    """
    if h < 1 or w < 1:
        raise ValueError("canvas must be at least 1x1")
    if spec.tone <= 0.0:
        return np.ones((h, w))
    if spec.tone >= 1.0:
        return np.zeros((h, w))
    if spec.kind == "stochastic":
        return _stochastic_screen(spec, h, w)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    s = _spot(spec.kind, spec.period, spec.angle, ys, xs)
    return np.where(s < _regular_threshold(spec), 0.0, 1.0)


def label_map(layout: PageLayout) -> np.ndarray:
    """Region index raster: ``i + 1`` for region ``i``, LINE_LABEL under lines."""
    shape = (layout.height, layout.width)
    labels = np.full(shape, -1, dtype=np.int32)
    for i, region in enumerate(layout.regions):
        mask = np.asarray(region.mask, dtype=bool)
        if mask.shape != shape:
            raise ValueError(f"region {i} mask shape {mask.shape} != page {shape}")
        if np.any(labels[mask] >= 0):
            raise ValueError(f"region {i} overlaps an earlier region")
        labels[mask] = i + 1
    line = np.asarray(layout.line_mask, dtype=bool)
    labels[line] = LINE_LABEL
    if np.any(labels < 0):
        raise ValueError("regions and line mask leave part of the page uncovered")
    return labels


def compose_page(layout: PageLayout) -> tuple[np.ndarray, np.ndarray]:
    """Fill each region with its screentone and ink the line mask on top."""
    labels = label_map(layout)
    page = np.ones((layout.height, layout.width))
    for i, region in enumerate(layout.regions):
        sel = labels == i + 1
        if sel.any():
            page[sel] = render_screentone(region.spec, layout.height, layout.width)[sel]
    page[labels == LINE_LABEL] = 0.0
    return page, labels


def sample_spec(rng: np.random.Generator, period_range=(2.0, 12.0), tone_range=(0.1, 0.9)) -> ScreentoneSpec:
    return ScreentoneSpec(
        kind=KINDS[int(rng.integers(len(KINDS)))],
        period=float(rng.uniform(*period_range)),
        angle=float(rng.uniform(0.0, 180.0)),
        tone=float(rng.uniform(*tone_range)),
        seed=int(rng.integers(2**31 - 1)),
    )


def _voronoi_labels(h, w, n, rng):
    min_dist = 0.5 * math.sqrt(h * w / max(n, 1))
    seeds = []
    for _ in range(1000 * n):
        if len(seeds) == n:
            break
        p = rng.uniform((0, 0), (h, w))
        if all(np.hypot(*(p - q)) >= min_dist for q in seeds):
            seeds.append(p)
    while len(seeds) < n:
        seeds.append(rng.uniform((0, 0), (h, w)))
    seeds = np.array(seeds)
    ys, xs = np.mgrid[0:h, 0:w]
    d = (ys[None] - seeds[:, 0, None, None]) ** 2 + (xs[None] - seeds[:, 1, None, None]) ** 2
    return np.argmin(d, axis=0)


def _boundaries(vor: np.ndarray) -> np.ndarray:
    edge = np.zeros(vor.shape, dtype=bool)
    edge[:, :-1] |= vor[:, :-1] != vor[:, 1:]
    edge[:-1, :] |= vor[:-1, :] != vor[1:, :]
    return edge


def _ellipse_outline(h, w, rng) -> np.ndarray:
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    ry, rx = rng.uniform(0.05, 0.2) * h, rng.uniform(0.05, 0.2) * w
    ys, xs = np.mgrid[0:h, 0:w]
    r = np.hypot((ys - cy) / ry, (xs - cx) / rx)
    # one-pixel-wide iso-contour at r = 1
    return np.abs(r - 1.0) * min(ry, rx) < 0.5


def random_layout(
    h: int,
    w: int,
    rng_seed: int,
    n_regions_range: tuple[int, int] = (2, 6),
    spec_pool: list[ScreentoneSpec] | None = None,
    line_width: int = 2,
    n_strokes_max: int = 2,
) -> PageLayout:
    """Seeded Voronoi page: region borders and a few ellipse strokes form the line art.

    With ``spec_pool`` the region screentones are drawn from that list;
    otherwise each spec is sampled over all kinds with period in [2, 12] and
    tone in [0.1, 0.9].
    """
    if h < 64 or w < 64:
        raise ValueError("pages must be at least 64x64")
    lo, hi = n_regions_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad n_regions_range {n_regions_range}")
    rng = np.random.default_rng(rng_seed)
    n = int(rng.integers(lo, hi + 1))
    vor = _voronoi_labels(h, w, n, rng)

    lines = _boundaries(vor)
    lines[:line_width // 2 + 1, :] = True
    lines[-(line_width // 2 + 1):, :] = True
    lines[:, :line_width // 2 + 1] = True
    lines[:, -(line_width // 2 + 1):] = True
    for _ in range(int(rng.integers(0, n_strokes_max + 1))):
        lines |= _ellipse_outline(h, w, rng)
    if line_width > 1:
        lines = ndimage.binary_dilation(lines, iterations=line_width // 2)

    regions = []
    for i in range(n):
        if spec_pool:
            spec = spec_pool[int(rng.integers(len(spec_pool)))]
        else:
            spec = sample_spec(rng)
        regions.append(Region(mask=(vor == i) & ~lines, spec=spec))
    return PageLayout(height=h, width=w, regions=regions, line_mask=lines)


def screentone_bank(
    kinds=KINDS,
    periods=(3.0, 4.0, 6.0, 8.0, 12.0),
    tones=(0.2, 0.4, 0.6, 0.8),
    angles=(0.0, 45.0),
) -> list[ScreentoneSpec]:
    """Deterministic grid of specs used for fitting and calibrating embeddings."""
    bank = []
    for kind in kinds:
        for period in periods:
            for tone in tones:
                for angle in (angles if kind != "stochastic" else (0.0,)):
                    bank.append(ScreentoneSpec(kind, period, angle, tone, seed=len(bank)))
    return bank
