"""Feature encoder, multi-scale aggregation and score-map head."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import conv2d, dcn_conv, selu


@dataclass(frozen=True)
class NetConfig:
    c1: int
    c2: int
    c3: int
    c4: int
    dim: int
    variant: str = "custom"

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3, self.c4, self.dim) < 1:
            raise ValueError("channel counts must be positive")
        if self.dim % 4:
            raise ValueError(f"dim must be divisible by 4 (four equal ublock outputs), got {self.dim}")

    @classmethod
    def preset(cls, name: str) -> "NetConfig":
        try:
            return cls(*PRESETS[name.upper()], variant=name.upper())
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(PRESETS)}") from None

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "T": (8, 16, 32, 64, 64),
    "N": (16, 32, 64, 128, 128),
    "L": (32, 64, 128, 128, 128),
    # desk-scale variant for toy training runs
    "MICRO": (4, 8, 16, 32, 32),
}


class Conv(nn.Module):
    """Plain KxK convolution with zero padding; LeCun-normal weights, zero bias."""

    def __init__(self, c_in: int, c_out: int, k: int, padding: int | None = None):
        super().__init__()
        self.padding = k // 2 if padding is None else padding
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k))
        self.bias = nn.Parameter(torch.zeros(c_out))
        nn.init.normal_(self.weight, std=1.0 / math.sqrt(c_in * k * k))

    def forward(self, x, counter=None):
        return conv2d(x, self.weight, self.bias, padding=self.padding, counter=counter)


class DeformConv(nn.Module):
    """3x3 deformable convolution; its offset predictor starts at zero."""

    def __init__(self, c_in: int, c_out: int, k: int = 3):
        super().__init__()
        self.k = k
        self.offset = Conv(c_in, 2 * k * k, 3)
        nn.init.zeros_(self.offset.weight)
        self.conv = Conv(c_in, c_out, k)

    def forward(self, x):
        B, _, H, W = x.shape
        # channels (2i, 2i+1) hold (dx, dy) of tap i
        off = self.offset(x).reshape(B, self.k * self.k, 2, H, W).permute(0, 3, 4, 1, 2)
        return dcn_conv(x, self.conv.weight, self.conv.bias, off)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, deformable: bool):
        super().__init__()
        make = DeformConv if deformable else Conv
        self.conv1 = make(c_in, c_out, 3)
        self.conv2 = make(c_out, c_out, 3)
        self.skip = Conv(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x):
        identity = x if self.skip is None else self.skip(x)
        return selu(self.conv2(selu(self.conv1(x))) + identity)


class ScoreHead(nn.Module):
    """[(1x1,8),SELU,[(3x3,4),SELU]x2,(3x3,1),sigmoid]."""

    def __init__(self, dim: int):
        super().__init__()
        self.reduce = Conv(dim, 8, 1)
        self.conv1 = Conv(8, 4, 3)
        self.conv2 = Conv(4, 4, 3)
        self.out = Conv(4, 1, 3)

    def forward(self, feat):
        x = selu(self.reduce(feat))
        x = selu(self.conv1(x))
        x = selu(self.conv2(x))
        return torch.sigmoid(self.out(x))[:, 0]


class Backbone(nn.Module):
    """Encoder (block1..block4), ublocks and score head.

    Inputs are ``(B, 3, H, W)`` images with H and W divisible by 32.
    """

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4, dim = cfg.c1, cfg.c2, cfg.c3, cfg.c4, cfg.dim
        self.block1_conv1 = Conv(3, c1, 3)
        self.block1_conv2 = Conv(c1, c1, 3)
        self.block2 = ResBlock(c1, c2, deformable=False)
        self.block3 = ResBlock(c2, c3, deformable=True)
        self.block4 = ResBlock(c3, c4, deformable=True)
        self.ublock1 = Conv(c1, dim // 4, 1)
        self.ublock2 = Conv(c2, dim // 4, 1)
        self.ublock3 = Conv(c3, dim // 4, 1)
        self.ublock4 = Conv(c4, dim // 4, 1)
        self.score_head = ScoreHead(dim)

    def encode(self, img: torch.Tensor):
        H, W = img.shape[-2:]
        if H % 32 or W % 32:
            raise ValueError(f"image size {H}x{W} is not divisible by 32")
        f1 = selu(self.block1_conv2(selu(self.block1_conv1(img))))
        f2 = self.block2(F.avg_pool2d(f1, 2))
        f3 = self.block3(F.avg_pool2d(f2, 4))
        f4 = self.block4(F.avg_pool2d(f3, 4))
        return f1, f2, f3, f4

    def aggregate(self, feats) -> torch.Tensor:
        f1, f2, f3, f4 = feats
        size = f1.shape[-2:]
        outs = []
        for f, ub in zip(feats, (self.ublock1, self.ublock2, self.ublock3, self.ublock4)):
            u = selu(ub(f))
            if u.shape[-2:] != size:
                u = F.interpolate(u, size=size, mode="bilinear", align_corners=False)
            outs.append(u)
        return torch.cat(outs, dim=1)

    def forward(self, img: torch.Tensor):
        """Return the aggregated feature ``(B, dim, H, W)`` and score map ``(B, H, W)``."""
        feat = self.aggregate(self.encode(img))
        return feat, self.score_head(feat)
