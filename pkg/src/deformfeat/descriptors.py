"""Sparse deformable descriptor head (SDDH), dense descriptor-map head (DMH)
and the plain sparse heads used in ablations.

Feature maps are ``(C, H, W)``; keypoints are ``(N, 2)`` sub-pixel ``(x, y)``.
Descriptors come out L2-normalised, one row per kept keypoint.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import bilinear_sample, conv2d, kernel_taps, selu

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SddhConfig:
    K: int = 3
    M: int = 16
    dim: int = 128

    def __post_init__(self):
        if self.K < 1 or self.K % 2 != 1:
            raise ValueError(f"K must be a positive odd integer, got {self.K}")
        if self.M < 1:
            raise ValueError(f"M must be positive, got {self.M}")


@dataclass
class DescriptorSet:
    vectors: torch.Tensor                  # (N, dim), unit rows
    indices: torch.Tensor                  # (N,) rows of the input keypoints that were kept
    sample_offsets: Optional[torch.Tensor] = None  # (N, M, 2), SDDH only
    dropped: list = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.vectors.shape[0])


def normalize(d: torch.Tensor) -> torch.Tensor:
    return F.normalize(d, p=2, dim=-1, eps=1e-12)


def inside_mask(positions: torch.Tensor, shape, margin: float) -> torch.Tensor:
    H, W = shape
    x, y = positions[:, 0], positions[:, 1]
    return (x >= margin) & (y >= margin) & (x <= W - 1 - margin) & (y <= H - 1 - margin)


def _lecun(t: torch.Tensor, fan_in: int) -> None:
    nn.init.normal_(t, std=1.0 / math.sqrt(fan_in))


class _Stage:
    """Context helper so the head can attribute counts to cost-model stages."""

    def __init__(self, counter, name):
        self.counter, self.name = counter, name

    def __enter__(self):
        if self.counter is not None:
            self.counter.push(self.name)

    def __exit__(self, *exc):
        if self.counter is not None:
            self.counter.pop()


class SDDH(nn.Module):
    """Per keypoint: estimate M sample offsets from a KxK feature patch, sample
    the feature map there, encode each sample with a shared 1x1 conv + SELU
    and aggregate them with per-position weights (convM).
    """

    def __init__(self, cfg: SddhConfig, c_in: Optional[int] = None):
        super().__init__()
        self.cfg = cfg
        K, M, dim = cfg.K, cfg.M, cfg.dim
        c = dim if c_in is None else c_in
        self.offset_conv_w = nn.Parameter(torch.empty(2 * M, c, K, K))
        self.offset_conv_b = nn.Parameter(torch.zeros(2 * M))
        self.offset_proj_w = nn.Parameter(torch.zeros(2 * M, 2 * M))
        self.offset_proj_b = nn.Parameter(torch.zeros(2 * M))
        self.phi_w = nn.Parameter(torch.empty(c, c))
        self.phi_b = nn.Parameter(torch.zeros(c))
        self.conv_m_w = nn.Parameter(torch.empty(M, dim, c))
        self.conv_m_b = nn.Parameter(torch.zeros(dim))
        _lecun(self.offset_conv_w, c * K * K)
        _lecun(self.phi_w, c)
        _lecun(self.conv_m_w, c * M)

    @classmethod
    def equivalent_to(cls, dmh: "DMH") -> "SDDH":
        """SDDH with M = K*K whose offsets are pinned to the regular grid and
        whose weights reproduce ``dmh`` exactly at in-bounds keypoints."""
        K = dmh.K
        c, dim = dmh.conv1_w.shape[1], dmh.conv_w.shape[0]
        head = cls(SddhConfig(K=K, M=K * K, dim=dim), c_in=c).to(dmh.conv_w.dtype)
        with torch.no_grad():
            head.offset_conv_w.zero_()
            head.offset_conv_b.zero_()
            head.offset_proj_w.zero_()
            head.offset_proj_b.copy_(kernel_taps(K, dtype=head.offset_proj_b.dtype).reshape(-1))
            head.phi_w.copy_(dmh.conv1_w[:, :, 0, 0])
            head.phi_b.copy_(dmh.conv1_b)
            head.conv_m_w.copy_(dmh.conv_w.reshape(dim, c, K * K).permute(2, 0, 1))
            head.conv_m_b.copy_(dmh.conv_b)
        return head

    def keypoint_patches(self, feat: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """``(N, K*K, C)`` features on the KxK grid around each keypoint (raster order)."""
        taps = kernel_taps(self.cfg.K, dtype=feat.dtype, device=feat.device)
        return bilinear_sample(feat, positions[:, None, :].to(feat.dtype) + taps)

    def estimate_offsets(self, patches: torch.Tensor, counter=None) -> torch.Tensor:
        """conv1x1(SELU(convKxK(patch))) on ``(N, K*K, C)`` patches -> ``(N, M, 2)``."""
        K, M = self.cfg.K, self.cfg.M
        if patches.shape[1] != K * K:
            raise ValueError(f"expected {K * K} patch positions, got {patches.shape[1]}")
        n, _, c = patches.shape
        w = self.offset_conv_w.reshape(2 * M, c, K * K)
        h = selu(torch.einsum("nkc,ock->no", patches, w) + self.offset_conv_b)
        out = h @ self.offset_proj_w.T + self.offset_proj_b
        if counter is not None:
            counter.add(n * 2 * M * K * K * c)
            counter.add(n * 2 * M * 2 * M)
        return out.reshape(n, M, 2)

    def encode_samples(self, samples: torch.Tensor, counter=None) -> torch.Tensor:
        """Phi then convM on ``(N, M, C)`` sampled features -> ``(N, dim)`` (unnormalised)."""
        n, m, c = samples.shape
        phi = selu(samples @ self.phi_w.T + self.phi_b)
        d = torch.einsum("nmc,mdc->nd", phi, self.conv_m_w) + self.conv_m_b
        if counter is not None:
            counter.add(n * m * c * self.phi_w.shape[0])
            counter.add(n * m * c * self.conv_m_w.shape[1])
        return d

    def forward(self, feat: torch.Tensor, positions: torch.Tensor, counter=None) -> DescriptorSet:
        return sddh_extract(feat, positions, self, counter=counter)


def estimate_offsets(patch: torch.Tensor, head: SDDH) -> torch.Tensor:
    """Offsets for a single ``(C, K, K)`` feature patch -> ``(M, 2)``."""
    K = head.cfg.K
    if patch.dim() != 3 or patch.shape[1:] != (K, K):
        raise ValueError(f"expected a (C, {K}, {K}) patch, got {tuple(patch.shape)}")
    flat = patch.reshape(patch.shape[0], K * K).T[None]
    return head.estimate_offsets(flat)[0]


def sddh_extract(feat: torch.Tensor, positions: torch.Tensor, head: SDDH, counter=None) -> DescriptorSet:
    """Descriptors at ``positions`` on an ``(C, H, W)`` feature map.

    Keypoints closer than K//2 to the border are dropped and reported in
    ``DescriptorSet.dropped``.
    """
    positions = torch.as_tensor(positions, dtype=feat.dtype)
    margin = head.cfg.K // 2
    keep = inside_mask(positions, feat.shape[-2:], margin)
    idx = torch.nonzero(keep).reshape(-1)
    dropped = torch.nonzero(~keep).reshape(-1).tolist()
    if dropped:
        log.info("dropped %d keypoints within %d px of the border", len(dropped), margin)
    p = positions[idx]
    patches = head.keypoint_patches(feat, p)  # gathering; not part of the op count
    with _Stage(counter, "sample position estimation"):
        offsets = head.estimate_offsets(patches, counter=counter)
    with _Stage(counter, "feature sample"):
        samples = bilinear_sample(feat, p[:, None, :] + offsets, counter=counter)
    with _Stage(counter, "descriptor extraction"):
        d = head.encode_samples(samples, counter=counter)
    return DescriptorSet(normalize(d), idx, offsets, dropped)


class DMH(nn.Module):
    """Dense descriptor map convKxK(SELU(conv1x1(F))), sampled at keypoints."""

    def __init__(self, c: int, dim: int, K: int = 3):
        super().__init__()
        self.K = K
        self.conv1_w = nn.Parameter(torch.empty(c, c, 1, 1))
        self.conv1_b = nn.Parameter(torch.zeros(c))
        self.conv_w = nn.Parameter(torch.empty(dim, c, K, K))
        self.conv_b = nn.Parameter(torch.zeros(dim))
        _lecun(self.conv1_w, c)
        _lecun(self.conv_w, c * K * K)

    def dense(self, feat: torch.Tensor, counter=None) -> torch.Tensor:
        x = selu(conv2d(feat, self.conv1_w, self.conv1_b, counter=counter))
        return conv2d(x, self.conv_w, self.conv_b, padding=self.K // 2, counter=counter)

    def forward(self, feat, positions, counter=None):
        return dmh_extract(feat, positions, self, counter=counter)


def dmh_extract(feat: torch.Tensor, positions: torch.Tensor, head: DMH, counter=None):
    """Return ``(dense (dim, H, W) map, DescriptorSet sampled at positions)``."""
    positions = torch.as_tensor(positions, dtype=feat.dtype)
    with _Stage(counter, "convolutions"):
        dense = head.dense(feat, counter=counter)
    with _Stage(counter, "descriptor sample"):
        d = bilinear_sample(dense, positions, counter=counter)
    return dense, DescriptorSet(normalize(d), torch.arange(len(positions)))


class SparseDescriptorHead(nn.Module):
    """Non-deformable sparse heads run on keypoint feature patches.

    ``sdh1``: [(1x1,d),SELU,(1x1,d)] on the keypoint feature;
    ``sdh2``: [(3x3,d)] on a 3x3 patch; ``sdh3``: [(3x3,d),SELU,(3x3,d)] on a 5x5 patch.
    """

    PATCH = {"sdh1": 1, "sdh2": 3, "sdh3": 5}

    def __init__(self, kind: str, c: int, dim: int):
        super().__init__()
        if kind not in self.PATCH:
            raise ValueError(f"unknown sparse head {kind!r}")
        self.kind = kind
        self.patch = self.PATCH[kind]
        if kind == "sdh1":
            self.layers = nn.ParameterList([nn.Parameter(torch.empty(dim, c, 1, 1)), nn.Parameter(torch.empty(dim, dim, 1, 1))])
        elif kind == "sdh2":
            self.layers = nn.ParameterList([nn.Parameter(torch.empty(dim, c, 3, 3))])
        else:
            self.layers = nn.ParameterList([nn.Parameter(torch.empty(dim, c, 3, 3)), nn.Parameter(torch.empty(dim, dim, 3, 3))])
        self.biases = nn.ParameterList([nn.Parameter(torch.zeros(dim)) for _ in self.layers])
        for w in self.layers:
            _lecun(w, w.shape[1] * w.shape[2] * w.shape[3])

    def forward(self, feat: torch.Tensor, positions: torch.Tensor, counter=None) -> DescriptorSet:
        positions = torch.as_tensor(positions, dtype=feat.dtype)
        margin = self.patch // 2
        keep = inside_mask(positions, feat.shape[-2:], margin)
        idx = torch.nonzero(keep).reshape(-1)
        p = positions[idx]
        taps = kernel_taps(self.patch, dtype=feat.dtype, device=feat.device)
        n = len(p)
        x = bilinear_sample(feat, p[:, None, :] + taps)  # (N, P*P, C)
        x = x.transpose(1, 2).reshape(n, -1, self.patch, self.patch)
        for i, (w, b) in enumerate(zip(self.layers, self.biases)):
            if i:
                x = selu(x)
            x = conv2d(x, w, b, counter=counter)
        d = x.reshape(n, -1)
        return DescriptorSet(normalize(d), idx, None, torch.nonzero(~keep).reshape(-1).tolist())


# ---------------------------------------------------------------------------
# descriptor files
#
# little-endian layout:
#   magic     8 bytes  b"DFDESC01"
#   header    <I N, <I dim, 8s variant (ASCII, NUL padded), <I M, <I K,
#             <I pad_bottom, <I pad_right  (rows/cols of zero padding added
#             to reach a multiple of 32)
#   records   N x (<f8 x, <f8 y, <f8 score, dim x <f4 descriptor)
# ---------------------------------------------------------------------------

MAGIC = b"DFDESC01"
_HEADER = struct.Struct("<II8sIIII")


@dataclass
class DescriptorFile:
    positions: np.ndarray    # (N, 2) float64
    scores: np.ndarray       # (N,) float64
    descriptors: np.ndarray  # (N, dim) float32
    variant: str
    M: int
    K: int
    pad: tuple = (0, 0)


def record_dtype(dim: int) -> np.dtype:
    return np.dtype([("x", "<f8"), ("y", "<f8"), ("score", "<f8"), ("desc", "<f4", (dim,))])


def write_descriptor_file(path, f: DescriptorFile) -> None:
    n, dim = f.descriptors.shape
    rec = np.zeros(n, dtype=record_dtype(dim))
    rec["x"], rec["y"] = f.positions[:, 0], f.positions[:, 1]
    rec["score"] = f.scores
    rec["desc"] = f.descriptors
    variant = f.variant.encode("ascii")[:8]
    header = _HEADER.pack(n, dim, variant, f.M, f.K, *f.pad)
    Path(path).write_bytes(MAGIC + header + rec.tobytes())


def read_descriptor_file(path) -> DescriptorFile:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a descriptor file (bad magic {raw[:8]!r})")
    n, dim, variant, M, K, pb, pr = _HEADER.unpack_from(raw, 8)
    body = raw[8 + _HEADER.size:]
    dt = record_dtype(dim)
    if len(body) != n * dt.itemsize:
        raise ValueError(f"{path}: expected {n} records of {dt.itemsize} bytes, got {len(body)} bytes")
    rec = np.frombuffer(body, dtype=dt)
    return DescriptorFile(
        positions=np.stack([rec["x"], rec["y"]], axis=1),
        scores=rec["score"].copy(),
        descriptors=rec["desc"].copy().reshape(n, dim),
        variant=variant.rstrip(b"\0").decode("ascii"),
        M=M,
        K=K,
        pad=(pb, pr),
    )
