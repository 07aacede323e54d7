"""Differentiable keypoint detection: NMS, threshold, top-k, soft-argmax refinement."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .numerics import bilinear_sample, nms, patch_coordinates, softargmax


@dataclass(frozen=True)
class DetectionConfig:
    radius: int = 2
    score_threshold: float = 0.2
    top_k: int = 5000
    t_det: float = 0.1

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if not self.t_det > 0:
            raise ValueError("t_det must be positive")

    @property
    def window(self) -> int:
        return 2 * self.radius + 1


@dataclass
class Keypoints:
    """Keypoints of one image.

    ``positions`` are refined sub-pixel ``(x, y)`` and carry gradients back to
    the score map; ``pixels`` are the integer detections the refinement
    patches were centred on; ``scores`` are the score map bilinearly read at
    ``positions``.
    """

    positions: torch.Tensor  # (N, 2)
    pixels: torch.Tensor     # (N, 2) long
    scores: torch.Tensor     # (N,)

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def detach(self) -> "Keypoints":
        return Keypoints(self.positions.detach(), self.pixels, self.scores.detach())


def sample_score_patch(scores: torch.Tensor, pixels: torch.Tensor, width: int) -> torch.Tensor:
    """``(N, W, W)`` windows of an ``(H, W)`` score map centred on integer ``pixels``.

    Raises if a window would leave the map; detection never produces such pixels.
    """
    pixels = torch.as_tensor(pixels).long().reshape(-1, 2)
    r = width // 2
    H, W = scores.shape
    x, y = pixels[:, 0], pixels[:, 1]
    if ((x < r) | (y < r) | (x > W - 1 - r) | (y > H - 1 - r)).any():
        raise ValueError(f"keypoint window of radius {r} crosses the border of a {H}x{W} map")
    d = patch_coordinates(width, dtype=torch.float64).long()
    cols = x[:, None, None] + d[..., 0]
    rows = y[:, None, None] + d[..., 1]
    return scores[rows, cols]


def refine(scores: torch.Tensor, pixels: torch.Tensor, cfg: DetectionConfig) -> Keypoints:
    """Soft-argmax refinement of integer ``pixels`` on their score windows."""
    pixels = torch.as_tensor(pixels).long().reshape(-1, 2)
    patches = sample_score_patch(scores, pixels, cfg.window)
    offsets = softargmax(patches, cfg.t_det)
    positions = pixels.to(scores.dtype) + offsets
    kp_scores = bilinear_sample(scores[None], positions)[..., 0]
    return Keypoints(positions, pixels, kp_scores)


def border_mask(shape, radius: int, device=None) -> torch.Tensor:
    H, W = shape
    m = torch.zeros(H, W, dtype=torch.bool, device=device)
    m[radius:H - radius, radius:W - radius] = True
    return m


def detect_pixels(scores: torch.Tensor, cfg: DetectionConfig) -> torch.Tensor:
    """Integer ``(x, y)`` of strict local maxima above threshold, best ``top_k`` first.

    Equal scores keep raster order.
    """
    with torch.no_grad():
        s = scores.detach()
        mask = nms(s, cfg.radius) & (s > cfg.score_threshold) & border_mask(s.shape, cfg.radius, s.device)
        ys, xs = torch.nonzero(mask, as_tuple=True)
        vals = s[ys, xs]
        order = torch.sort(-vals, stable=True).indices[: cfg.top_k]
        return torch.stack([xs[order], ys[order]], dim=1)


def detect(scores: torch.Tensor, cfg: DetectionConfig) -> Keypoints:
    """Detect keypoints on an ``(H, W)`` score map."""
    return refine(scores, detect_pixels(scores, cfg), cfg)
