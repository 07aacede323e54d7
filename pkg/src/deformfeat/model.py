"""Backbone + detector + SDDH wired into one extractor."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, NetConfig
from .descriptors import SDDH, DescriptorSet, SddhConfig, sddh_extract
from .dkd import DetectionConfig, Keypoints, detect


@dataclass
class Features:
    keypoints: Keypoints
    descriptors: DescriptorSet

    @property
    def positions(self) -> torch.Tensor:
        return self.keypoints.positions[self.descriptors.indices]

    @property
    def scores(self) -> torch.Tensor:
        return self.keypoints.scores[self.descriptors.indices]


class FeatureNet(nn.Module):
    def __init__(self, net: NetConfig, K: int = 3, M: int = 16, seed: int = 0):
        super().__init__()
        self.net_cfg = net
        self.sddh_cfg = SddhConfig(K=K, M=M, dim=net.dim)
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.backbone = Backbone(net)
            self.sddh = SDDH(self.sddh_cfg)

    def forward(self, img: torch.Tensor):
        """``(B, 3, H, W)`` -> aggregated feature ``(B, dim, H, W)``, score map ``(B, H, W)``."""
        return self.backbone(img)

    def describe(self, feat: torch.Tensor, positions: torch.Tensor) -> DescriptorSet:
        return sddh_extract(feat, positions, self.sddh)

    def extract(self, img: torch.Tensor, det: DetectionConfig = DetectionConfig()) -> Features:
        """Keypoints and descriptors for a single ``(3, H, W)`` image."""
        if img.dim() == 3:
            img = img[None]
        feat, scores = self(img)
        kp = detect(scores[0], det)
        return Features(kp, self.describe(feat[0], kp.positions))


def pad_to_multiple(img: torch.Tensor, multiple: int = 32):
    """Zero-pad the bottom/right of ``(..., H, W)``; returns the image and ``(pad_bottom, pad_right)``."""
    H, W = img.shape[-2:]
    pb, pr = (-H) % multiple, (-W) % multiple
    if pb or pr:
        img = F.pad(img, (0, pr, 0, pb))
    return img, (pb, pr)
