"""Desk-scale datasets and training runs shared by the acceptance suite.

Every artifact lives under a cache root and is rebuilt only when missing, so
the slow runs happen once per session.  Set MANGARESTORE_DESK_CACHE to keep
them between sessions.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from mangarestore.checkpoint import load_model
from mangarestore.degradation import DegradationParams
from mangarestore.imaging import load_image
from mangarestore.restorer import mr_forward
from mangarestore.scale_estimator import estimate_scale_voted
from mangarestore.screentone import ScreentoneSpec
from mangarestore.trainer import DatasetManifest, TrainConfig, build_dataset, train_mr, train_se

log = logging.getLogger(__name__)

# eight screentone kinds over the four families
SE_POOL = [
    ScreentoneSpec("dot", 6, 45, 0.3), ScreentoneSpec("dot", 8, 45, 0.6), ScreentoneSpec("line", 6, 45, 0.4),
    ScreentoneSpec("line", 8, 0, 0.5), ScreentoneSpec("checker", 8, 30, 0.5), ScreentoneSpec("dot", 12, 15, 0.5),
    ScreentoneSpec("line", 12, 120, 0.3), ScreentoneSpec("stochastic", 4, 0, 0.4, seed=3),
]
SE_SAMPLER = dict(p_blur=0.0, p_jpeg=0.0, p_noise=0.5, noise_range=(2.0, 5.0))
SE_PAGE = 256
SE_CONFIG = TrainConfig(iterations=2000, lr=1e-4, se_channels=16, batch_size=8, patch_size=64, checkpoint_every=0)
SE_EVAL_PATCHES = 8
SE_EVAL_PATCH = 64
VOLUME_SCALE = 2.0

# four kinds whose periods survive both training scales
MR_POOL = [
    ScreentoneSpec("dot", 8, 45, 0.4), ScreentoneSpec("line", 8, 30, 0.5),
    ScreentoneSpec("checker", 10, 20, 0.5), ScreentoneSpec("stochastic", 6, 0, 0.4, seed=5),
]
# fine screens that no training scale can carry (pattern-agnostic after degradation)
AGNOSTIC_POOL = [
    ScreentoneSpec("dot", 3, 45, 0.4), ScreentoneSpec("line", 3, 0, 0.5), ScreentoneSpec("checker", 4, 20, 0.5),
    ScreentoneSpec("line", 2.5, 60, 0.3),
]
MR_SCALES = (1.5, 2.0)
MR_PAGE = 128
AGNOSTIC_PAGE = 192
MR_CONFIG = TrainConfig(iterations=1500, lr=1e-3, mr_channels=32, batch_size=4, patch_size=32, checkpoint_every=0)


def _dataset(root: Path, n: int, seed: int, **kwargs) -> DatasetManifest:
    if (root / "manifest.jsonl").exists():
        return DatasetManifest.load(root)
    log.info("building %d pages in %s", n, root)
    return build_dataset(n, root, seed=seed, **kwargs)


def _run(out: Path, prefix: str, train, config, manifest) -> Path:
    final = out / f"{prefix}_final.pt"
    if final.exists():
        return final
    torch.set_num_threads(1)
    return train(config, manifest, out)


# -- scale network ---------------------------------------------------------


def se_train_set(root) -> DatasetManifest:
    return _dataset(Path(root) / "se_train", 200, 11, page_size=SE_PAGE, spec_pool=SE_POOL, scale_range=(1.0, 3.0),
                    **SE_SAMPLER)


def se_test_set(root) -> DatasetManifest:
    return _dataset(Path(root) / "se_test", 50, 12, page_size=SE_PAGE, spec_pool=SE_POOL, scale_range=(1.0, 3.0),
                    **SE_SAMPLER)


def se_volume_set(root) -> DatasetManifest:
    """Twenty held-out pages degraded at one shared scale."""
    return _dataset(Path(root) / "se_volume", 20, 13, page_size=SE_PAGE, spec_pool=SE_POOL,
                    scale_range=(VOLUME_SCALE, VOLUME_SCALE), **SE_SAMPLER)


def se_model(root, cons_weight: float = SE_CONFIG.cons_weight) -> Path:
    cfg = SE_CONFIG.replace(cons_weight=cons_weight)
    return _run(Path(root) / f"se_cons{cons_weight:g}", "se", train_se, cfg, se_train_set(root))


def se_predictions(ckpt, manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    model, _, _ = load_model(ckpt, expect_kind="se")
    preds = [estimate_scale_voted(model, load_image(manifest.path(r.degraded_path)), SE_EVAL_PATCHES,
                                  SE_EVAL_PATCH).scale for r in manifest.records]
    return np.array(preds), np.array([r.scale for r in manifest.records])


# -- restoration network ---------------------------------------------------


def _mr_params(seed: int) -> DegradationParams:
    return DegradationParams(scale=MR_SCALES[seed % len(MR_SCALES)])


def mr_train_set(root) -> DatasetManifest:
    return _dataset(Path(root) / "mr_train", 60, 21, page_size=MR_PAGE, spec_pool=MR_POOL, param_fn=_mr_params)


def mr_test_set(root) -> DatasetManifest:
    return _dataset(Path(root) / "mr_test", 12, 22, page_size=MR_PAGE, spec_pool=MR_POOL, param_fn=_mr_params)


def mr_mixed_train_set(root) -> DatasetManifest:
    """Training pages where pattern-agnostic screens sit beside identifiable ones."""
    return _dataset(Path(root) / "mr_mixed_train", 60, 24, page_size=MR_PAGE, spec_pool=MR_POOL + AGNOSTIC_POOL,
                    param_fn=_mr_params)


def mr_agnostic_set(root) -> DatasetManifest:
    """Held-out pages mixing the training screens with pattern-agnostic ones."""
    return _dataset(Path(root) / "mr_agnostic", 12, 23, page_size=AGNOSTIC_PAGE, spec_pool=MR_POOL + AGNOSTIC_POOL,
                    n_regions_range=(3, 5), param_fn=_mr_params)


def restore_page(model, manifest: DatasetManifest, rec):
    gt = load_image(manifest.path(rec.gt_path))
    low = load_image(manifest.path(rec.degraded_path))
    return mr_forward(model, low, rec.scale, out_size=gt.shape).restored, gt, low


def mr_model(root, gamma: float = MR_CONFIG.w_hom, mixed: bool = False) -> Path:
    """Restoration run on the four-screen set, or with ``mixed`` on the set with pattern-agnostic screens."""
    cfg = MR_CONFIG.replace(w_hom=gamma)
    data = mr_mixed_train_set(root) if mixed else mr_train_set(root)
    name = f"mr_{'mixed_' if mixed else ''}gamma{gamma:g}"
    return _run(Path(root) / name, "mr", train_mr, cfg, data)
