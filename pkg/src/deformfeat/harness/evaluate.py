"""Running a network (or the raw-patch baseline) over homography pairs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .. import evalbench as eb
from ..dkd import DetectionConfig
from ..geometry import Homography
from ..model import FeatureNet, pad_to_multiple
from ..numerics import bilinear_sample, patch_coordinates
from .data import DatasetEntry, PairParams, procedural_image, read_image, synth_pair
from .train import image_tensor

log = logging.getLogger(__name__)


@dataclass
class ImageFeatures:
    positions: np.ndarray    # (N, 2) float64
    scores: np.ndarray       # (N,)
    descriptors: np.ndarray  # (N, dim)
    pad: Tuple[int, int] = (0, 0)


def extract_features(model: FeatureNet, img: np.ndarray, det: DetectionConfig) -> ImageFeatures:
    """Keypoints and descriptors of an ``(H, W)`` or ``(H, W, 3)`` image in [0, 1].

    The image is zero-padded to a multiple of 32; keypoints that land in the
    padding are discarded.
    """
    dtype = next(model.parameters()).dtype
    x = image_tensor(img, dtype)
    h, w = x.shape[-2:]
    x, pad = pad_to_multiple(x)
    with torch.no_grad():
        f = model.extract(x, det)
    pos = f.positions.double().numpy()
    inside = (pos[:, 0] <= w - 1) & (pos[:, 1] <= h - 1)
    return ImageFeatures(pos[inside], f.scores.double().numpy()[inside],
                         f.descriptors.vectors.double().numpy()[inside], pad)


def gray(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=2) if img.ndim == 3 else img


def patch_descriptors(img: np.ndarray, positions: np.ndarray, width: int = 9) -> np.ndarray:
    """Raw-patch baseline: zero-mean, unit-norm grey-level ``width x width``
    patches bilinearly sampled around each position (inner product = NCC)."""
    g = torch.from_numpy(np.asarray(gray(img), dtype=np.float64))[None]
    pts = torch.from_numpy(np.asarray(positions, dtype=np.float64)).reshape(-1, 1, 2)
    taps = patch_coordinates(width, dtype=torch.float64).reshape(1, -1, 2)
    v = bilinear_sample(g, pts + taps)[..., 0].numpy()
    v = v - v.mean(axis=1, keepdims=True)
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


@dataclass
class EvalPair:
    image_A: np.ndarray
    image_B: np.ndarray
    H: np.ndarray
    name: str = ""


def synthetic_eval_pairs(n: int, size: int, seed: int, params: PairParams = PairParams.mild()) -> List[EvalPair]:
    """Held-out pairs: fresh procedural images (own seed) under mild warps."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        p = synth_pair(procedural_image(size, rng), rng, params)
        out.append(EvalPair(p.image_A, p.image_B, p.H.H.numpy(), f"synthetic/{i:03d}"))
    return out


def dataset_eval_pairs(entries: Sequence[DatasetEntry]) -> List[EvalPair]:
    out = []
    for e in entries:
        if not isinstance(e.gt, Homography):
            log.warning("skipping %s: homography metrics need a homography ground truth", e.name)
            continue
        out.append(EvalPair(read_image(e.image_A), read_image(e.image_B), e.gt.H.numpy(), e.name))
    return out


Describer = Callable[[np.ndarray, ImageFeatures], np.ndarray]


def evaluate(model: FeatureNet, pairs: Sequence[EvalPair], det: DetectionConfig, th: float = 3.0,
             describer: Optional[Describer] = None, ransac_seed: int = 0) -> List[eb.MetricReport]:
    """Metric report per pair. ``describer`` swaps the network descriptors for
    another descriptor computed at the same keypoints."""
    reports = []
    for p in pairs:
        fa = extract_features(model, p.image_A, det)
        fb = extract_features(model, p.image_B, det)
        da = fa.descriptors if describer is None else describer(p.image_A, fa)
        db = fb.descriptors if describer is None else describer(p.image_B, fb)
        reports.append(eb.evaluate_pair(fa.positions, fb.positions, da, db, p.H,
                                        p.image_A.shape, p.image_B.shape, th, ransac_seed))
    return reports


def raw_patch_describer(width: int = 9) -> Describer:
    return lambda img, f: patch_descriptors(img, f.positions, width)
