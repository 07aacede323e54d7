"""Training losses: reprojection, dispersity peak, sparse NRE and reliability.

Every loss is defined over matched keypoints only. When there is nothing to
average over, the loss is a zero tensor; callers detect that case from the
match count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import torch

from .dkd import sample_score_patch
from .numerics import patch_coordinates, softmax


@dataclass(frozen=True)
class LossWeights:
    rp: float = 1.0
    pk: float = 0.5
    ds: float = 5.0
    re: float = 1.0

    def __post_init__(self):
        if min(self.rp, self.pk, self.ds, self.re) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class Temperatures:
    t_det: float = 0.1
    t_des: float = 0.1
    t_rel: float = 1.0

    def __post_init__(self):
        if min(self.t_det, self.t_des, self.t_rel) <= 0:
            raise ValueError("temperatures must be positive")


class NonFiniteLoss(FloatingPointError):
    pass


def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.sum() * 0.0


def reprojection_loss(pos_A: torch.Tensor, pos_B: torch.Tensor, pairs: torch.Tensor,
                      warp_AB: Callable, warp_BA: Callable) -> torch.Tensor:
    """Mean over matched pairs of ``(|p_A - p_BA| + |p_B - p_AB|) / 2``."""
    if len(pairs) == 0:
        return _zero(pos_A) + _zero(pos_B)
    pa = pos_A[pairs[:, 0]]
    pb = pos_B[pairs[:, 1]]
    e_a = torch.linalg.vector_norm(pa - warp_BA(pb), dim=-1)
    e_b = torch.linalg.vector_norm(pb - warp_AB(pa), dim=-1)
    return (0.5 * (e_a + e_b)).mean()


def dispersity_peak_loss(scores: torch.Tensor, positions: torch.Tensor, pixels: torch.Tensor,
                         width: int = 5, t: float = 0.1) -> torch.Tensor:
    """Mean over keypoints of ``softmax(patch / t) . |p - c|``.

    ``c`` runs over the absolute coordinates of the ``width x width`` window
    centred on each keypoint's integer pixel.
    """
    if len(positions) == 0:
        return _zero(scores)
    patches = sample_score_patch(scores, pixels, width).reshape(len(pixels), -1)
    prob = softmax(patches, t)
    coords = pixels.to(positions.dtype)[:, None, :] + patch_coordinates(width, dtype=positions.dtype).reshape(1, -1, 2)
    dist = torch.linalg.vector_norm(positions[:, None, :] - coords, dim=-1)
    return (prob * dist).sum(dim=1).mean()


def similarity(d_A: torch.Tensor, D_B: torch.Tensor) -> torch.Tensor:
    return D_B @ d_A


def matching_prob(sim: torch.Tensor, t_des: float = 0.1) -> torch.Tensor:
    return softmax((sim - 1.0) / t_des, 1.0)


def _nre_one_way(D_A, D_B, ia, ib, t_des):
    logits = (D_A[ia] @ D_B.T - 1.0) / t_des
    log_q = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -log_q[torch.arange(len(ia)), ib]


def sparse_nre_loss(D_A: torch.Tensor, D_B: torch.Tensor, pairs: torch.Tensor, t_des: float = 0.1) -> torch.Tensor:
    """Cross-entropy between the one-hot reprojection vector and the matching
    probability, averaged over matched keypoints in both directions."""
    if len(pairs) == 0:
        return _zero(D_A) + _zero(D_B)
    ia, ib = pairs[:, 0], pairs[:, 1]
    ab = _nre_one_way(D_A, D_B, ia, ib, t_des)
    ba = _nre_one_way(D_B, D_A, ib, ia, t_des)
    return torch.cat([ab, ba]).mean()


def reliability(d_A: torch.Tensor, D_B: torch.Tensor, match_index: int, t_rel: float = 1.0) -> torch.Tensor:
    return softmax(similarity(d_A, D_B), t_rel)[match_index]


def reliabilities(D_A: torch.Tensor, D_B: torch.Tensor, pairs: torch.Tensor, t_rel: float = 1.0):
    """Reliability of every matched keypoint, for image A and image B."""
    sim = D_A @ D_B.T
    ia, ib = pairs[:, 0], pairs[:, 1]
    r_a = softmax(sim[ia], t_rel, dim=1)[torch.arange(len(ia)), ib]
    r_b = softmax(sim.T[ib], t_rel, dim=1)[torch.arange(len(ib)), ia]
    return r_a, r_b


def reliable_loss_one(scores: torch.Tensor, rel: torch.Tensor) -> torch.Tensor:
    total = scores.sum()
    if len(scores) == 0 or total.item() == 0:
        return _zero(scores) + _zero(rel)
    return ((1.0 - rel) * scores).sum() / total


def reliable_loss(scores_A: torch.Tensor, rel_A: torch.Tensor,
                  scores_B: torch.Tensor, rel_B: torch.Tensor) -> torch.Tensor:
    """Score-weighted unreliability, normalised per image and averaged over both."""
    return 0.5 * (reliable_loss_one(scores_A, rel_A) + reliable_loss_one(scores_B, rel_B))


def total_loss(components: Mapping[str, torch.Tensor], w: LossWeights = LossWeights()) -> torch.Tensor:
    for name, v in components.items():
        if not math.isfinite(float(v.detach())):
            raise NonFiniteLoss(f"loss component {name} is {float(v.detach())}")
    return w.rp * components["rp"] + w.pk * components["pk"] + w.ds * components["ds"] + w.re * components["re"]
