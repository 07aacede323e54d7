"""Checkpoints: one ``.npz`` of named parameter arrays plus a JSON model header.

The header (stored under the ``__meta__`` key) records the backbone widths,
the SDDH ``K``/``M`` and the init seed, so a checkpoint rebuilds its own
network. Arrays keep their dtype, so save/load is bitwise.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..backbone import NetConfig
from ..model import FeatureNet

META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def model_meta(model: FeatureNet) -> dict:
    return {"net": model.net_cfg.to_dict(), "K": model.sddh_cfg.K, "M": model.sddh_cfg.M, "seed": model.seed}


def save_checkpoint(path, model: FeatureNet, extra: dict | None = None) -> None:
    meta = model_meta(model)
    if extra:
        meta["extra"] = extra
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def read_meta(path) -> dict:
    with np.load(path) as z:
        if META_KEY not in z:
            raise CheckpointError(f"{path}: no model header")
        return json.loads(z[META_KEY].tobytes().decode())


def load_checkpoint(path, expect: dict | None = None) -> FeatureNet:
    """Rebuild the network stored at ``path``.

    ``expect`` may pin any of ``variant``, ``dim``, ``K`` or ``M``; a mismatch
    raises :class:`CheckpointError` rather than silently loading another model.
    """
    path = Path(path)
    meta = read_meta(path)
    net = NetConfig(**meta["net"])
    for key, want in (expect or {}).items():
        have = meta["net"].get(key, meta.get(key))
        if have != want:
            raise CheckpointError(f"{path}: checkpoint has {key}={have!r}, expected {want!r}")
    model = FeatureNet(net, K=meta["K"], M=meta["M"], seed=meta["seed"])
    with np.load(path) as z:
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != META_KEY}
    own = model.state_dict()
    if set(state) != set(own):
        missing, unexpected = sorted(set(own) - set(state)), sorted(set(state) - set(own))
        raise CheckpointError(f"{path}: parameter mismatch (missing {missing}, unexpected {unexpected})")
    for k, v in state.items():
        if v.shape != own[k].shape:
            raise CheckpointError(f"{path}: {k} has shape {tuple(v.shape)}, model expects {tuple(own[k].shape)}")
    model = model.to(next(iter(state.values())).dtype)
    model.load_state_dict(state)
    return model
