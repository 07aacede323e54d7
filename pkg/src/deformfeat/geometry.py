"""Point transforms and ground-truth correspondences.

All functions take and return torch tensors of ``(..., 2)`` pixel points and
stay differentiable, so the reprojection loss can push gradients through a
warp. Pixel convention: x right, y down, origin at the centre of the top-left
pixel. A warp that has no answer for a point (invalid depth, point behind
the camera) returns NaN coordinates for it instead of raising.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .numerics import bilinear_sample


class GeometryError(ValueError):
    pass


def _t(a, dtype=torch.float64) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    return torch.as_tensor(np.asarray(a), dtype=dtype)


@dataclass(frozen=True)
class AffineMap:
    A: torch.Tensor
    b: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "A", _t(self.A))
        object.__setattr__(self, "b", _t(self.b))
        if not torch.isfinite(self.A).all():
            raise GeometryError("affine matrix must be finite")

    @classmethod
    def rotation(cls, degrees: float, scale: float = 1.0, b=(0.0, 0.0)) -> "AffineMap":
        c, s = math.cos(math.radians(degrees)), math.sin(math.radians(degrees))
        return cls(torch.tensor([[c, -s], [s, c]], dtype=torch.float64) * scale, _t(b))


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, stored with ``H[2, 2] == 1``."""

    H: torch.Tensor

    def __post_init__(self):
        h = _t(self.H).to(torch.float64)
        if h.shape != (3, 3) or not torch.isfinite(h).all():
            raise GeometryError(f"homography must be a finite 3x3 matrix, got shape {tuple(h.shape)}")
        if abs(h[2, 2].item()) < 1e-12:
            raise GeometryError("cannot normalise homography with H[2, 2] == 0")
        h = h / h[2, 2]
        if abs(torch.linalg.det(h).item()) < 1e-12:
            raise GeometryError("homography is singular")
        object.__setattr__(self, "H", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(torch.eye(3, dtype=torch.float64))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(torch.tensor([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]], dtype=torch.float64))

    def inverse(self) -> "Homography":
        return Homography(torch.linalg.inv(self.H))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.H @ other.H)

    def __call__(self, p: torch.Tensor) -> torch.Tensor:
        return warp_homography(p, self)


def read_homography(path) -> Homography:
    """Read a plain-text 3x3 matrix (HPatches ``H_1_N`` files)."""
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    values = np.array(rows, dtype=np.float64)
    if values.shape != (3, 3):
        raise GeometryError(f"{path}: expected 3 rows of 3 values, got shape {values.shape}")
    return Homography(values)


def write_homography(path, h: Homography) -> None:
    m = h.H.detach().cpu().numpy()
    Path(path).write_text("\n".join(" ".join(repr(float(v)) for v in row) for row in m) + "\n")


@dataclass(frozen=True)
class RelativePose:
    """Rigid motion from camera A to camera B plus per-image intrinsics and depth."""

    R_AB: torch.Tensor
    t_AB: torch.Tensor
    K_A: torch.Tensor
    K_B: torch.Tensor
    depth_A: torch.Tensor
    depth_B: torch.Tensor

    def __post_init__(self):
        for name in ("R_AB", "t_AB", "K_A", "K_B", "depth_A", "depth_B"):
            object.__setattr__(self, name, _t(getattr(self, name)).to(torch.float64))
        R = self.R_AB
        if (R.T @ R - torch.eye(3, dtype=R.dtype)).abs().max() > 1e-9:
            raise GeometryError("R_AB is not orthonormal")
        for K in (self.K_A, self.K_B):
            if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
                raise GeometryError("intrinsics must be upper triangular with positive focal lengths")

    def inverse(self) -> "RelativePose":
        return RelativePose(self.R_AB.T, -self.R_AB.T @ self.t_AB, self.K_B, self.K_A, self.depth_B, self.depth_A)

    def __call__(self, p: torch.Tensor) -> torch.Tensor:
        return warp_perspective(p, self)


@dataclass
class CorrespondenceSet:
    pairs: torch.Tensor                   # (K, 2) long: (index_A, index_B)
    reprojection_distances: torch.Tensor  # (K,) pixels, max of both directions

    def __len__(self) -> int:
        return int(self.pairs.shape[0])


def _dehomogenise(h: torch.Tensor) -> torch.Tensor:
    return h[..., :2] / h[..., 2:3]


def project(point3d: torch.Tensor, K: torch.Tensor) -> torch.Tensor:
    point3d, K = _t(point3d), _t(K)
    if (point3d[..., 2] <= 0).any():
        raise GeometryError("cannot project a point with non-positive depth")
    return _dehomogenise(point3d @ K.T.to(point3d.dtype))


def affine_transform(p: torch.Tensor, m: AffineMap) -> torch.Tensor:
    p = _t(p)
    return p @ m.A.T.to(p.dtype) + m.b.to(p.dtype)


def deformable_transform(p: torch.Tensor, offsets: torch.Tensor, i: int) -> torch.Tensor:
    offsets = _t(offsets)
    if not 0 <= i < offsets.shape[0]:
        raise IndexError(f"offset index {i} out of range for {offsets.shape[0]} offsets")
    return _t(p) + offsets[i]


def warp_homography(p: torch.Tensor, h: Homography) -> torch.Tensor:
    p = _t(p)
    ph = torch.cat([p, torch.ones_like(p[..., :1])], dim=-1) @ h.H.T.to(p.dtype)
    if (ph[..., 2].abs() < 1e-12).any():
        raise GeometryError("point maps to infinity under the homography")
    return _dehomogenise(ph)


def interpolate_depth(depth: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Bilinear depth at ``p``; NaN where a contributing neighbour is missing or <= 0."""
    depth = _t(depth)
    p = _t(p).to(depth.dtype)
    H, W = depth.shape
    x, y = p[..., 0], p[..., 1]
    x0, y0 = torch.floor(x), torch.floor(y)
    fx, fy = x - x0, y - y0
    ok = torch.isfinite(x) & torch.isfinite(y)
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi <= W - 1) & (yi >= 0) & (yi <= H - 1)
        xl = torch.nan_to_num(xi).long().clamp(0, W - 1)
        yl = torch.nan_to_num(yi).long().clamp(0, H - 1)
        good = inside & (depth[yl, xl] > 0)
        ok = ok & (good | (w == 0))
    d = bilinear_sample(depth[None], torch.nan_to_num(p))[..., 0]
    return torch.where(ok, d, torch.full_like(d, float("nan")))


def warp_perspective(p: torch.Tensor, pose: RelativePose) -> torch.Tensor:
    """``pi(d_A * R_AB * pi^-1(p) + t_AB)``; NaN rows mark "no correspondence"."""
    p = _t(p)
    d = interpolate_depth(pose.depth_A, p).to(p.dtype)
    ray = torch.cat([p, torch.ones_like(p[..., :1])], dim=-1) @ torch.linalg.inv(pose.K_A).T.to(p.dtype)
    X = d[..., None] * ray @ pose.R_AB.T.to(p.dtype) + pose.t_AB.to(p.dtype)
    z = X[..., 2]
    valid = torch.isfinite(z) & (z > 0)
    safe = torch.where(valid[..., None], X, torch.ones_like(X))
    out = _dehomogenise(safe @ pose.K_B.T.to(p.dtype))
    return torch.where(valid[..., None], out, torch.full_like(out, float("nan")))


Warp = Callable[[torch.Tensor], torch.Tensor]


def gt_correspondences(P_A: torch.Tensor, P_B: torch.Tensor, warp_AB: Warp, warp_BA: Warp,
                       th_gt: float = 5.0) -> CorrespondenceSet:
    """Mutual nearest neighbours after warping, kept when both distances are below ``th_gt``.

    Ties go to the lower index. Points whose warp is undefined never match.
    """
    P_A, P_B = _t(P_A).detach(), _t(P_B).detach()
    empty = CorrespondenceSet(torch.zeros((0, 2), dtype=torch.long), torch.zeros(0, dtype=torch.float64))
    if len(P_A) == 0 or len(P_B) == 0:
        return empty
    with torch.no_grad():
        p_ab = warp_AB(P_A).to(torch.float64)
        p_ba = warp_BA(P_B).to(torch.float64)
    inf = torch.tensor(float("inf"), dtype=torch.float64)
    exact = "donot_use_mm_for_euclid_dist"
    d_ab = torch.cdist(p_ab, P_B.to(torch.float64), compute_mode=exact)  # (N_A, N_B) distances in B
    d_ba = torch.cdist(P_A.to(torch.float64), p_ba, compute_mode=exact)  # (N_A, N_B) distances in A
    d_ab = torch.where(torch.isnan(d_ab), inf, d_ab)
    d_ba = torch.where(torch.isnan(d_ba), inf, d_ba)
    nn_ab = torch.argmin(d_ab, dim=1)
    nn_ba = torch.argmin(d_ba, dim=0)
    ia = torch.arange(len(P_A))
    mutual = nn_ba[nn_ab] == ia
    dist = torch.maximum(d_ab[ia, nn_ab], d_ba[ia, nn_ab])
    keep = mutual & (dist < th_gt)
    if not keep.any():
        return empty
    pairs = torch.stack([ia[keep], nn_ab[keep]], dim=1)
    return CorrespondenceSet(pairs, dist[keep])
