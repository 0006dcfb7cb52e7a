"""Model checkpoints: a torch parameter archive plus a JSON manifest.

The manifest records the architecture hash so a Phase 1 checkpoint can only
be loaded into a Phase 2 model with the same layout.
"""

import json
from dataclasses import asdict
from pathlib import Path

import torch

from . import io
from .errors import ConfigError
from .nets import NetConfig, VesselDAModel, architecture_hash


def model_hash(model: VesselDAModel) -> str:
    return architecture_hash(model.cfg, model.components())


def save_checkpoint(path, model: VesselDAModel, iteration, seed, config=None, **extra):
    """Write ``<path>.pt`` and ``<path>.json``; return the manifest dict."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".pt.tmp")
    torch.save({"model": model.state_dict(), "net": asdict(model.cfg)}, tmp)
    tmp.replace(path.with_suffix(".pt"))
    manifest = {
        "architecture_hash": model_hash(model),
        "trained_phase": int(model.trained_phase),
        "iteration": int(iteration),
        "seed": int(seed),
        "net": asdict(model.cfg),
        "config": config,
        **extra,
    }
    io.write_json(path.with_suffix(".json"), manifest)
    return manifest


def load_checkpoint(path, expected_hash=None):
    """Rebuild the model stored at ``path``; returns ``(model, manifest)``."""
    path = Path(path)
    path = path.with_suffix("") if path.suffix in (".pt", ".json") else path
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = torch.load(path.with_suffix(".pt"), map_location="cpu", weights_only=True)
    model = VesselDAModel(NetConfig(**blob["net"]))
    found = model_hash(model)
    if found != manifest["architecture_hash"]:
        raise ConfigError(f"{path}: archive does not match its manifest hash ({found} != {manifest['architecture_hash']})")
    if expected_hash is not None and found != expected_hash:
        raise ConfigError(f"{path}: architecture hash {found} does not match the configured model {expected_hash}")
    model.load_state_dict(blob["model"])
    return model, manifest


def phase1_handoff(state, w_avg_samples=4096):
    """Model for Phase 2: EMA generator weights, trained D, fresh encoder."""
    model = state.model
    model.G.load_state_dict(state.g_ema.state_dict())
    model.G.update_w_avg(n=w_avg_samples, seed=state.cfg.seed)
    model.trained_phase.fill_(1)
    return model
