"""Dataset assembly and the semi-supervised training loops.

Paired records carry the ground-truth page, its region labels and the exact
degradation parameters.  Unpaired records only expose the degraded raster;
they stand in for real scans and are trained with the label-free loss terms.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .checkpoint import load_model, read_checkpoint, save_checkpoint
from .degradation import DegradationParams, degrade, round_half_up, sample_params
from .embedding import relabel
from .imaging import load_image, save_image
from .restorer import MRLossWeights, MRNet, MRNetConfig, intensity_reference, mr_total_loss
from .scale_estimator import SENet, SENetConfig, consistency_loss, estimate_scale_voted, he_init, scale_loss
from .screentone import ScreentoneSpec, compose_page, random_layout

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


# -- configuration ---------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 8
    iterations: int = 5000
    patch_size: int = 128
    supervised_fraction: float = 0.5
    seed: int = 0
    checkpoint_every: int = 1000
    # scale network
    n_patches: int = 4
    cons_weight: float = 0.1
    se_channels: int = 32
    se_downsample: int = 4
    use_cbam: bool = True
    # restoration network
    mr_channels: int = 64
    noise_channels: int = 4
    w_conf: float = 0.5
    w_bin: float = 0.5
    w_itn: float = 0.5
    w_hom: float = 0.02

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError(f"Adam betas must lie in [0, 1), got {b}")
        if not 0.0 < self.supervised_fraction <= 1.0:
            raise ValueError("supervised_fraction must lie in (0, 1]")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown training option {key!r}")
            kwargs[key] = _coerce(raw, types[key])
        return cls(**kwargs)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def mr_weights(self) -> MRLossWeights:
        return MRLossWeights(phi=self.w_conf, omega=self.w_bin, kappa=self.w_itn, gamma=self.w_hom)


def _coerce(raw, typ):
    if not isinstance(raw, str):
        return raw
    typ = str(typ)
    if typ == "bool":
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ == "int":
        return int(raw)
    return float(raw)


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path, **overrides) -> TrainConfig:
    values = parse_kv(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_mapping(values)


# -- dataset ---------------------------------------------------------------


@dataclass
class PageRecord:
    id: str
    size: tuple[int, int]
    seed: int
    regions: list[dict] = field(default_factory=list)
    degraded_path: str | None = None
    gt_path: str | None = None
    labels_path: str | None = None
    params: dict | None = None
    paired: bool = True

    @property
    def scale(self) -> float | None:
        return None if self.params is None else float(self.params["scale"])

    def specs(self) -> list[ScreentoneSpec]:
        return [ScreentoneSpec.from_dict(d) for d in self.regions]

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["size"] = list(self.size)
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "PageRecord":
        d = json.loads(line)
        d["size"] = tuple(d["size"])
        return cls(**d)


@dataclass
class DatasetManifest:
    root: Path
    records: list[PageRecord]

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        lines = path.read_text().splitlines()
        return cls(root=path.parent, records=[PageRecord.from_json(l) for l in lines if l.strip()])

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("".join(r.to_json() + "\n" for r in self.records))
        os.replace(tmp, path)
        return path

    def path(self, rel: str | None) -> Path | None:
        return None if rel is None else self.root / rel

    @property
    def paired(self) -> list[PageRecord]:
        return [r for r in self.records if r.paired]

    @property
    def unpaired(self) -> list[PageRecord]:
        return [r for r in self.records if not r.paired]

    def subset(self, ids) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest(self.root, [r for r in self.records if r.id in keep])


def _page_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def synth_pages(
    n_pages: int,
    out_dir,
    seed: int,
    page_size: int | tuple[int, int] = 512,
    n_regions_range: tuple[int, int] = (2, 6),
    spec_pool: list[ScreentoneSpec] | None = None,
    id_offset: int = 0,
) -> DatasetManifest:
    """Render ground-truth pages and label maps, without degradation."""
    if n_pages < 1:
        raise ValueError("n_pages must be >= 1")
    out = Path(out_dir)
    h, w = (page_size, page_size) if isinstance(page_size, int) else page_size
    records = []
    for i, ps in enumerate(_page_seeds(seed, n_pages)):
        rid = f"{i + id_offset:05d}"
        layout = random_layout(h, w, ps, n_regions_range, spec_pool=spec_pool)
        page, labels = compose_page(layout)
        save_image(page, out / "pages" / f"{rid}.png")
        _save_labels(labels, out / "labels" / f"{rid}.png")
        records.append(PageRecord(
            id=rid, size=(h, w), seed=ps,
            regions=[s.to_dict() for s in layout.specs],
            gt_path=f"pages/{rid}.png", labels_path=f"labels/{rid}.png",
        ))
    manifest = DatasetManifest(out, records)
    manifest.save()
    return manifest


def _save_labels(labels: np.ndarray, path: Path) -> None:
    from PIL import Image

    if labels.max() > 255:
        raise ValueError("more than 255 labels do not fit an 8-bit label map")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8)).save(path)


def load_labels(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int32)


def degrade_dataset(
    manifest: DatasetManifest,
    seed: int,
    out_dir=None,
    params: DegradationParams | None = None,
    unpaired_fraction: float = 0.0,
    param_fn: Callable[[int], DegradationParams] | None = None,
    **sampler_kwargs,
) -> DatasetManifest:
    """Degrade every page into ``out_dir`` (default: the manifest's own root).

    Parameters come from ``params`` (shared), ``param_fn(page_seed)`` or
    :func:`sample_params` with ``sampler_kwargs``, in that order.

    A seeded subset of ``round(n * unpaired_fraction)`` records becomes
    unpaired: its ground truth, labels and parameters are left out of the new
    manifest.  Source files are never modified.
    """
    if not 0.0 <= unpaired_fraction < 1.0:
        raise ValueError("unpaired_fraction must lie in [0, 1)")
    out = Path(out_dir) if out_dir is not None else manifest.root
    same_root = out.resolve() == manifest.root.resolve()
    n = len(manifest.records)
    rng = np.random.default_rng(seed)
    n_unpaired = round_half_up(n * unpaired_fraction)
    unpaired = set(rng.permutation(n)[:n_unpaired].tolist())
    seeds = _page_seeds(seed + 1, n)
    records = []
    for i, (rec, ps) in enumerate(zip(manifest.records, seeds)):
        if rec.gt_path is None:
            raise ValueError(f"record {rec.id} has no ground-truth page to degrade")
        if params is not None:
            p = params
        elif param_fn is not None:
            p = param_fn(ps)
        else:
            p = sample_params(ps, **sampler_kwargs)
        low = degrade(load_image(manifest.path(rec.gt_path)), p, rng_seed=ps)
        rel = f"degraded/{rec.id}.png"
        save_image(low, out / rel)
        if i in unpaired:
            rec = dataclasses.replace(rec, degraded_path=rel, gt_path=None, labels_path=None, params=None,
                                      regions=[], paired=False)
        else:
            if not same_root:
                for key in ("gt_path", "labels_path"):
                    src = getattr(rec, key)
                    if src is not None:
                        (out / src).parent.mkdir(parents=True, exist_ok=True)
                        shutil.copyfile(manifest.path(src), out / src)
            rec = dataclasses.replace(rec, degraded_path=rel, params=p.to_dict(), paired=True)
        records.append(rec)
    result = DatasetManifest(out, records)
    result.save()
    return result


def build_dataset(
    n_pages: int,
    out_dir,
    seed: int,
    page_size: int = 512,
    unpaired_fraction: float = 0.0,
    n_regions_range: tuple[int, int] = (2, 6),
    spec_pool: list[ScreentoneSpec] | None = None,
    params: DegradationParams | None = None,
    param_fn: Callable[[int], DegradationParams] | None = None,
    **sampler_kwargs,
) -> DatasetManifest:
    """Synthesize pages, degrade them and write ``manifest.jsonl``."""
    manifest = synth_pages(n_pages, out_dir, seed, page_size, n_regions_range, spec_pool)
    return degrade_dataset(manifest, seed, params=params, unpaired_fraction=unpaired_fraction, param_fn=param_fn,
                           **sampler_kwargs)


class PageStore:
    """Cached raster access that records every read as ``(tag, kind, id)``."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.by_id = {r.id: r for r in manifest.records}
        self._cache: dict[tuple[str, str], np.ndarray] = {}
        self.access_log: list[tuple[str, str, str]] = []
        self.tag = ""

    def _get(self, kind: str, rid: str, loader):
        self.access_log.append((self.tag, kind, rid))
        key = (kind, rid)
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    def degraded(self, rid: str) -> np.ndarray:
        rec = self.by_id[rid]
        return self._get("degraded", rid, lambda: load_image(self.manifest.path(rec.degraded_path)).astype(np.float32))

    def gt(self, rid: str) -> np.ndarray:
        rec = self.by_id[rid]
        if rec.gt_path is None:
            raise KeyError(f"record {rid} has no ground truth")
        return self._get("gt", rid, lambda: load_image(self.manifest.path(rec.gt_path)).astype(np.float32))

    def labels(self, rid: str) -> np.ndarray:
        rec = self.by_id[rid]
        if rec.labels_path is None:
            raise KeyError(f"record {rid} has no labels")
        return self._get("labels", rid, lambda: load_labels(self.manifest.path(rec.labels_path)))


# -- shared loop machinery -------------------------------------------------


def is_supervised_step(step: int, fraction: float, have_unpaired: bool) -> bool:
    """Exact-fraction interleave: with 0.5 the steps alternate sup/unsup."""
    if not have_unpaired or fraction >= 1.0:
        return True
    return math.floor((step + 1) * fraction) > math.floor(step * fraction)


def _rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": json.dumps(rng.bit_generator.state), "torch": torch.get_rng_state()}


def _restore_rng(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = json.loads(state["numpy"])
    torch.set_rng_state(state["torch"])


class LossLog:
    def __init__(self, path: Path, fields: list[str], append: bool):
        self.path = path
        self.fields = fields
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not (append and path.exists())
        self._fh = open(path, "w" if fresh else "a", newline="")
        self._w = csv.DictWriter(self._fh, fieldnames=fields)
        if fresh:
            self._w.writeheader()
        self.rows: list[dict] = []

    def write(self, row: dict):
        self._w.writerow(row)
        self.rows.append(row)

    def close(self):
        self._fh.close()


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _setup(config: TrainConfig, model, out_dir, resume):
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    he_init(model)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=(config.adam_beta1, config.adam_beta2))
    start = 0
    if resume is not None:
        header, payload = read_checkpoint(resume)
        model.load_state_dict(payload["state_dict"])
        opt.load_state_dict(payload["optimizer"])
        start = header["iteration"]
        _restore_rng(rng, payload["rng"])
        log.info("resumed from %s at iteration %d", resume, start)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return rng, opt, start, out


def _checkpoint(out: Path, prefix: str, model, opt, it, config, rng, final=False) -> Path:
    extra = {"train_config": dataclasses.asdict(config)}
    name = f"{prefix}_final.pt" if final else f"{prefix}_iter{it:06d}.pt"
    return save_checkpoint(out / name, model, opt, it, extra=extra, rng_state=_rng_state(rng))


def _random_crop(img: np.ndarray, size: int, rng) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return img[y:y + size, x:x + size], (y, x)


# -- scale network ---------------------------------------------------------


def se_model_from_config(config: TrainConfig) -> SENet:
    return SENet(SENetConfig(base_channels=config.se_channels, n_downsample=config.se_downsample,
                             use_cbam=config.use_cbam))


def train_se(config: TrainConfig, manifest: DatasetManifest, out_dir, resume=None, store: PageStore | None = None) -> Path:
    """Train the scale network; returns the final checkpoint path.

    Supervised steps minimise scale loss + ``cons_weight`` x consistency over
    ``n_patches`` crops per page; unsupervised steps use the consistency term
    alone.  ``losses.csv`` in ``out_dir`` receives one row per step.
    """
    paired, unpaired = manifest.paired, manifest.unpaired
    if not paired:
        raise ValueError("scale training needs at least one paired record")
    store = store or PageStore(manifest)
    model = se_model_from_config(config)
    rng, opt, start, out = _setup(config, model, out_dir, resume)
    patch = min([config.patch_size] + [min(store.degraded(r.id).shape) for r in manifest.records])
    if patch < model.config.min_side:
        raise ValueError(f"degraded pages too small for {model.config.n_downsample} downsample modules")
    losses = LossLog(out / "losses.csv", ["iteration", "mode", "loss", "scl", "cons"], append=resume is not None)
    model.train()
    try:
        for it in range(start, config.iterations):
            sup = is_supervised_step(it, config.supervised_fraction, bool(unpaired))
            pool = paired if sup else unpaired
            store.tag = "sup" if sup else "unsup"
            picks = [pool[int(i)] for i in rng.integers(0, len(pool), config.batch_size)]
            crops = []
            for rec in picks:
                img = store.degraded(rec.id)
                crops.extend(_random_crop(img, patch, rng)[0] for _ in range(config.n_patches))
            x = torch.from_numpy(np.stack(crops)[:, None])
            s = model(x).view(config.batch_size, config.n_patches)
            cons = consistency_loss(s) if config.n_patches >= 2 else s.new_zeros(())
            if sup:
                s_gt = torch.tensor([r.scale for r in picks], dtype=s.dtype)[:, None]
                scl = scale_loss(s, s_gt.expand_as(s))
                loss = scl + config.cons_weight * cons
            else:
                scl = s.new_zeros(())
                loss = config.cons_weight * cons
            opt.zero_grad()
            if loss.requires_grad and loss.item() != 0.0:
                loss.backward()
                opt.step()
            losses.write({"iteration": it + 1, "mode": store.tag, "loss": f"{loss.item():.8g}",
                          "scl": f"{scl.item():.8g}", "cons": f"{cons.item():.8g}"})
            if (it + 1) % max(config.iterations // 10, 1) == 0:
                log.info("se iter %d/%d loss %.4f", it + 1, config.iterations, loss.item())
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0 and it + 1 < config.iterations:
                _checkpoint(out, "se", model, opt, it + 1, config, rng)
    finally:
        losses.close()
    model.eval()
    return _checkpoint(out, "se", model, opt, config.iterations, config, rng, final=True)


# -- restoration network ---------------------------------------------------


def mr_model_from_config(config: TrainConfig) -> MRNet:
    return MRNet(MRNetConfig(base_channels=config.mr_channels, noise_channels=config.noise_channels))


def _aligned_crop_origin(n_low: int, n_high: int, size: int, s: float, rng) -> int:
    """Low-res crop start whose high-res image ``start * s`` lands nearest an integer."""
    hi_size = round_half_up(size * s)
    lo_max = n_low - size
    starts = [y for y in range(0, lo_max + 1) if round_half_up(y * s) + hi_size <= n_high]
    if not starts:
        raise ValueError("page too small for the requested crop")
    y0 = starts[int(rng.integers(len(starts)))]
    window = [y for y in starts if abs(y - y0) <= 8]
    return min(window, key=lambda y: (abs(y * s - round(y * s)), abs(y - y0)))


def estimate_unpaired_scales(se_model: SENet, store: PageStore, records, n_patches=4, patch_size=128) -> dict[str, float]:
    store.tag = "se-estimate"
    out = {}
    for rec in records:
        img = store.degraded(rec.id)
        p = min(patch_size, *img.shape)
        out[rec.id] = float(np.clip(estimate_scale_voted(se_model, img, n_patches, p).scale, 1.0, 4.0))
    return out


def train_mr(config: TrainConfig, manifest: DatasetManifest, out_dir, se_checkpoint=None, resume=None,
             store: PageStore | None = None) -> Path:
    """Train the restoration network; returns the final checkpoint path.

    Supervised samples use ``(I_x, s_gt, I_gt, labels)`` with the full
    objective; unsupervised samples get their scale from a frozen scale
    network and an intensity reference built from the input alone.
    """
    paired, unpaired = manifest.paired, manifest.unpaired
    if not paired:
        raise ValueError("restoration training needs at least one paired record")
    store = store or PageStore(manifest)
    unpaired_scale = {}
    if unpaired:
        if se_checkpoint is None:
            raise ValueError("unpaired records need a scale-network checkpoint")
        se_model, _, _ = load_model(se_checkpoint, expect_kind="se")
        unpaired_scale = estimate_unpaired_scales(se_model, store, unpaired)
    model = mr_model_from_config(config)
    rng, opt, start, out = _setup(config, model, out_dir, resume)
    weights = config.mr_weights()
    fields = ["iteration", "mode", "loss", "pix", "conf", "bin", "itn", "hom"]
    losses = LossLog(out / "losses.csv", fields, append=resume is not None)
    model.train()
    try:
        for it in range(start, config.iterations):
            sup = is_supervised_step(it, config.supervised_fraction, bool(unpaired))
            pool = paired if sup else unpaired
            store.tag = "sup" if sup else "unsup"
            picks = [pool[int(i)] for i in rng.integers(0, len(pool), config.batch_size)]
            total = 0.0
            parts_sum: dict[str, float] = {}
            for rec in picks:
                low = store.degraded(rec.id)
                s = rec.scale if sup else unpaired_scale[rec.id]
                size = min(config.patch_size, *low.shape)
                gen = torch.Generator().manual_seed(int(rng.integers(2**31 - 1)))
                if sup:
                    gt = store.gt(rec.id)
                    lab = store.labels(rec.id)
                    y = _aligned_crop_origin(low.shape[0], gt.shape[0], size, s, rng)
                    x = _aligned_crop_origin(low.shape[1], gt.shape[1], size, s, rng)
                    th = tw = round_half_up(size * s)
                    hy, hx = round_half_up(y * s), round_half_up(x * s)
                    i_gt = torch.from_numpy(gt[hy:hy + th, hx:hx + tw])[None, None]
                    sp = relabel(lab[hy:hy + th, hx:hx + tw]) if weights.gamma else None
                else:
                    crop, (y, x) = _random_crop(low, size, rng)
                    th = tw = round_half_up(size * s)
                    i_gt, sp = None, None
                i_x = torch.from_numpy(low[y:y + size, x:x + size])[None, None]
                i_y, m_c = model(i_x, s, (th, tw), generator=gen)
                ref = None if sup else intensity_reference(i_x, (th, tw))
                loss, parts = mr_total_loss(i_y, m_c, ref, i_gt=i_gt, superpixels=sp, weights=weights, supervised=sup)
                total = total + loss / len(picks)
                for k, v in parts.items():
                    parts_sum[k] = parts_sum.get(k, 0.0) + v.item() / len(picks)
            opt.zero_grad()
            total.backward()
            opt.step()
            row = {"iteration": it + 1, "mode": store.tag, "loss": f"{total.item():.8g}"}
            row.update({k: f"{parts_sum.get(k, float('nan')):.8g}" for k in fields[3:]})
            losses.write(row)
            if (it + 1) % max(config.iterations // 10, 1) == 0:
                log.info("mr iter %d/%d loss %.4f", it + 1, config.iterations, total.item())
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0 and it + 1 < config.iterations:
                _checkpoint(out, "mr", model, opt, it + 1, config, rng)
    finally:
        losses.close()
    model.eval()
    return _checkpoint(out, "mr", model, opt, config.iterations, config, rng, final=True)
