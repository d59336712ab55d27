"""Checkpoint archive shared by both networks.

A checkpoint is a ``torch.save`` dict: a JSON header string (network kind,
architecture config, training state metadata) plus the named-parameter
state dict and, for resumable training, optimizer and RNG states.  Writes go
to a temporary file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import pickle
from pathlib import Path

import torch

from .restorer import MRNet, MRNetConfig
from .scale_estimator import SENet, SENetConfig

FORMAT_VERSION = 1
KINDS = {"se": (SENet, SENetConfig), "mr": (MRNet, MRNetConfig)}


def model_kind(model) -> str:
    if isinstance(model, SENet):
        return "se"
    if isinstance(model, MRNet):
        return "mr"
    raise TypeError(f"not a known network: {type(model).__name__}")


def save_checkpoint(path, model, optimizer=None, iteration: int = 0, extra: dict | None = None, rng_state=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": model_kind(model),
        "config": model.config.to_dict(),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "iteration": int(iteration),
        "extra": extra or {},
    }
    payload = {
        "header": json.dumps(header),
        "state_dict": model.state_dict(),
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if rng_state is not None:
        payload["rng"] = rng_state
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, payload)`` without building a model."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    header = json.loads(payload["header"])
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header.get('format_version')}")
    return header, payload


def load_model(path, expect_kind: str | None = None):
    """Build the network recorded in a checkpoint and load its weights."""
    header, payload = read_checkpoint(path)
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"{path} holds a {kind!r} network, expected {expect_kind!r}")
    net_cls, cfg_cls = KINDS[kind]
    model = net_cls(cfg_cls(**header["config"]))
    model = model.to(getattr(torch, header.get("dtype", "float32")))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, header, payload
