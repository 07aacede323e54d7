"""Training loop.

One optimiser step consumes ``accumulation`` micro-batches of ``batch_size``
image pairs. For every pair both images go through the network, loss
keypoints are drawn (top detections plus random pixels, deduplicated by a
greedy score-ordered NMS), descriptors are extracted at the keypoints
(detached unless ``stop_gradients`` is off) and the weighted loss is averaged over the pairs of the
micro-batch. Gradients of the micro-batches are summed before the Adam step.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from ..descriptors import DescriptorSet
from ..dkd import Keypoints, detect_pixels, refine
from ..geometry import Homography, gt_correspondences
from ..losses import (NonFiniteLoss, dispersity_peak_loss, reliabilities, reliable_loss,
                      reprojection_loss, sparse_nre_loss, total_loss)
from ..model import FeatureNet, pad_to_multiple
from .checkpoint import save_checkpoint
from .config import TrainConfig, dump_config
from .data import DatasetEntry, PairParams, procedural_image, read_image, synth_pair, to_rgb

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "L_rp", "L_pk", "L_ds", "L_re", "total")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainPair:
    image_A: torch.Tensor  # (3, H, W)
    image_B: torch.Tensor
    warp_AB: Callable
    warp_BA: Callable
    name: str = ""


def image_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(to_rgb(img).transpose(2, 0, 1))).to(dtype)


def pair_params(cfg: TrainConfig) -> PairParams:
    return PairParams(cfg.max_rotation, cfg.min_scale, cfg.max_scale, cfg.max_shear,
                      cfg.max_perspective, cfg.max_translation, cfg.photometric, cfg.noise)


class SyntheticPairs:
    """Endless stream of homography pairs built from a pool of procedural images."""

    def __init__(self, cfg: TrainConfig, seed: Optional[int] = None, params: Optional[PairParams] = None):
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.params = params or pair_params(cfg)
        self.dtype = DTYPES[cfg.dtype]
        self.pool = [procedural_image(cfg.image_size, self.rng) for _ in range(cfg.pool_size)]

    def __call__(self) -> TrainPair:
        img = self.pool[int(self.rng.integers(len(self.pool)))]
        p = synth_pair(img, self.rng, self.params)
        return TrainPair(image_tensor(p.image_A, self.dtype), image_tensor(p.image_B, self.dtype),
                         p.H, p.H.inverse(), "synthetic")


class DatasetPairs:
    """Cycles through dataset entries in a seeded random order.

    Images are zero-padded at the bottom/right to a multiple of 32, which
    leaves pixel coordinates, and therefore the ground truth, unchanged.
    """

    def __init__(self, entries: Sequence[DatasetEntry], cfg: TrainConfig):
        if not entries:
            raise ValueError("no training data")
        self.entries = list(entries)
        self.rng = np.random.default_rng(cfg.seed)
        self.dtype = DTYPES[cfg.dtype]
        self.order: List[int] = []

    def __call__(self) -> TrainPair:
        if not self.order:
            self.order = list(self.rng.permutation(len(self.entries)))
        e = self.entries[self.order.pop()]
        a, _ = pad_to_multiple(image_tensor(read_image(e.image_A), self.dtype))
        b, _ = pad_to_multiple(image_tensor(read_image(e.image_B), self.dtype))
        gt = e.gt
        inv = gt.inverse()
        return TrainPair(a, b, gt, inv, e.name)


# ---------------------------------------------------------------------------
# loss keypoints
# ---------------------------------------------------------------------------

def nms_dedupe(pixels: torch.Tensor, values: torch.Tensor, radius: int) -> torch.Tensor:
    """Greedy NMS over candidate pixels: visit by decreasing value (ties keep
    input order) and drop any candidate within Chebyshev distance ``radius`` of
    one already kept. Returns the kept indices in visiting order."""
    order = torch.sort(-values, stable=True).indices.tolist()
    pts = pixels.tolist()
    span = 2 * radius + 1
    hi = pixels.max(0).values.tolist() if len(pts) else [0, 0]
    taken = np.zeros((hi[1] + span, hi[0] + span), dtype=bool)  # shifted by +radius
    keep = []
    for i in order:
        x, y = pts[i]
        if taken[y + radius, x + radius]:
            continue
        keep.append(i)
        taken[y:y + span, x:x + span] = True
    return torch.tensor(keep, dtype=torch.long)


def loss_keypoints(scores: torch.Tensor, cfg: TrainConfig, gen: torch.Generator) -> Keypoints:
    """Top ``n_detected`` detections plus ``n_random`` random border-valid
    pixels, deduplicated, then refined with soft-argmax."""
    det = cfg.detection
    H, W = scores.shape
    r = det.radius
    top = detect_pixels(scores, det)
    n = cfg.n_random
    rand = torch.stack([torch.randint(r, W - r, (n,), generator=gen),
                        torch.randint(r, H - r, (n,), generator=gen)], dim=1)
    cand = torch.cat([top, rand])
    with torch.no_grad():
        vals = scores.detach()[cand[:, 1], cand[:, 0]]
    keep = nms_dedupe(cand, vals, r)
    return refine(scores, cand[keep], det)


# ---------------------------------------------------------------------------
# one pair
# ---------------------------------------------------------------------------

@dataclass
class PairLoss:
    total: torch.Tensor
    components: dict
    matches: int


def pair_loss(model: FeatureNet, pair: TrainPair, feat_A, score_A, feat_B, score_B,
              cfg: TrainConfig, gen: torch.Generator) -> PairLoss:
    """Weighted loss of one pair given its network outputs (``(C, H, W)``, ``(H, W)``)."""
    t = cfg.temperatures
    kp_A = loss_keypoints(score_A, cfg, gen)
    kp_B = loss_keypoints(score_B, cfg, gen)
    sg = (lambda x: x.detach()) if cfg.stop_gradients else (lambda x: x)
    ds_A: DescriptorSet = model.describe(feat_A, sg(kp_A.positions))
    ds_B: DescriptorSet = model.describe(feat_B, sg(kp_B.positions))
    pos_A, pix_A, sc_A = (x[ds_A.indices] for x in (kp_A.positions, kp_A.pixels, kp_A.scores))
    pos_B, pix_B, sc_B = (x[ds_B.indices] for x in (kp_B.positions, kp_B.pixels, kp_B.scores))

    gt = gt_correspondences(pos_A.detach(), pos_B.detach(), pair.warp_AB, pair.warp_BA, cfg.th_gt)
    pairs = gt.pairs
    ia, ib = pairs[:, 0], pairs[:, 1]
    w = cfg.detection.window
    rp = reprojection_loss(pos_A, pos_B, pairs, pair.warp_AB, pair.warp_BA)
    pk = 0.5 * (dispersity_peak_loss(score_A, pos_A[ia], pix_A[ia], w, t.t_det)
                + dispersity_peak_loss(score_B, pos_B[ib], pix_B[ib], w, t.t_det))
    ds = sparse_nre_loss(ds_A.vectors, ds_B.vectors, pairs, t.t_des)
    if len(pairs):
        rel_A, rel_B = reliabilities(sg(ds_A.vectors), sg(ds_B.vectors), pairs, t.t_rel)
        re = reliable_loss(sc_A[ia], rel_A, sc_B[ib], rel_B)
    else:
        re = sc_A.sum() * 0.0
    comps = {"rp": rp, "pk": pk, "ds": ds, "re": re}
    return PairLoss(total_loss(comps, cfg.weights), comps, len(pairs))


def _forward_pairs(model: FeatureNet, pairs: Sequence[TrainPair]):
    """Network outputs for every image; stacked into one batch when shapes agree."""
    imgs = [im for p in pairs for im in (p.image_A, p.image_B)]
    if all(im.shape == imgs[0].shape for im in imgs):
        feat, scores = model(torch.stack(imgs))
        return list(feat), list(scores)
    outs = [model(im[None]) for im in imgs]
    return [f[0] for f, _ in outs], [s[0] for _, s in outs]


def micro_batch_loss(model: FeatureNet, pairs: Sequence[TrainPair], cfg: TrainConfig,
                     gen: torch.Generator, step: int = 0, dump_dir=None):
    feats, scores = _forward_pairs(model, pairs)
    totals, comps = [], {k: 0.0 for k in ("rp", "pk", "ds", "re")}
    for i, pair in enumerate(pairs):
        try:
            pl = pair_loss(model, pair, feats[2 * i], scores[2 * i], feats[2 * i + 1], scores[2 * i + 1], cfg, gen)
        except NonFiniteLoss as e:
            path = dump_pair(dump_dir, step, pair, str(e))
            raise TrainingAborted(f"step {step}: {e}; offending pair dumped to {path}") from e
        totals.append(pl.total)
        for k, v in pl.components.items():
            comps[k] += float(v.detach()) / len(pairs)
    return torch.stack(totals).mean(), comps


def dump_pair(dump_dir, step: int, pair: TrainPair, reason: str) -> Optional[Path]:
    if dump_dir is None:
        log.error("non-finite loss at step %d (%s); no dump directory", step, reason)
        return None
    path = Path(dump_dir) / f"nonfinite_step{step}.npz"
    gt = pair.warp_AB
    H = gt.H.numpy() if isinstance(gt, Homography) else np.full((3, 3), np.nan)
    np.savez(path, image_A=pair.image_A.numpy(), image_B=pair.image_B.numpy(), H_AB=H,
             reason=np.array(reason), name=np.array(pair.name))
    log.error("non-finite loss at step %d (%s); pair written to %s", step, reason, path)
    return path


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: FeatureNet
    log: List[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    loss_csv: Optional[Path] = None


def make_optimizer(model: FeatureNet, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def train(cfg: TrainConfig, data=None, out_dir=None, model: Optional[FeatureNet] = None,
          progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run ``cfg.steps`` optimiser steps.

    ``data`` is a callable returning :class:`TrainPair` objects, a list of
    :class:`DatasetEntry`, or ``None`` for procedural synthetic pairs. With
    ``out_dir`` set, the CSV loss log and checkpoints are written there.
    """
    dtype = DTYPES[cfg.dtype]
    if data is None:
        source = SyntheticPairs(cfg)
    elif callable(data):
        source = data
    else:
        source = DatasetPairs(data, cfg)
    if model is None:
        model = FeatureNet(cfg.net, K=cfg.K, M=cfg.M, seed=cfg.seed)
    model = model.to(dtype).train()
    opt = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    writer = csv_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_file = open(out / "loss.csv", "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(LOG_FIELDS)
        (out / "config.txt").write_text(dump_config(cfg))
    result = TrainResult(model, loss_csv=None if out is None else out / "loss.csv")
    try:
        for step in range(1, cfg.steps + 1):
            opt.zero_grad(set_to_none=False)
            total, comps = 0.0, {k: 0.0 for k in ("rp", "pk", "ds", "re")}
            for _ in range(cfg.accumulation):
                pairs = [source() for _ in range(cfg.batch_size)]
                loss, c = micro_batch_loss(model, pairs, cfg, gen, step, out)
                loss.backward()
                total += float(loss.detach()) / cfg.accumulation
                for k in comps:
                    comps[k] += c[k] / cfg.accumulation
            opt.step()
            row = {"step": step, "L_rp": comps["rp"], "L_pk": comps["pk"], "L_ds": comps["ds"],
                   "L_re": comps["re"], "total": total}
            result.log.append(row)
            if writer is not None:
                writer.writerow([step] + [repr(row[k]) for k in LOG_FIELDS[1:]])
                csv_file.flush()
            if progress is not None:
                progress(row)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d total %.5f", step, total)
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"step{step:06d}.npz", model, {"step": step})
    finally:
        if csv_file is not None:
            csv_file.close()
    if out is not None:
        result.checkpoint = out / "final.npz"
        save_checkpoint(result.checkpoint, model, {"step": cfg.steps})
    return result


def read_loss_log(path) -> List[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(f)]
