"""Differentiable kernels shared by the network, detector and losses.

Conventions used across the package:

* feature grids are torch tensors laid out ``(C, H, W)`` or ``(B, C, H, W)``;
* points are ``(..., 2)`` tensors holding ``(x, y)`` in pixels, x to the right,
  y down, with the origin at the centre of the top-left pixel;
* everything outside the grid reads as zero.

Kernels that the cost model needs to account for take an optional
``counter`` (see :mod:`deformfeat.complexity`) and report their
multiply-add count to it.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


def selu(x: torch.Tensor) -> torch.Tensor:
    return F.selu(x)


def bilinear_sample(grid: torch.Tensor, points: torch.Tensor, counter=None) -> torch.Tensor:
    """Sample ``grid`` at sub-pixel ``points`` with zero padding.

    ``grid`` is ``(C, H, W)`` with ``points`` shaped ``(..., 2)``, or
    ``(B, C, H, W)`` with ``points`` shaped ``(B, ..., 2)``. Returns the
    sampled values with the channel axis last: ``(..., C)`` or ``(B, ..., C)``.
    Differentiable with respect to both the grid and the points.
    """
    unbatched = grid.dim() == 3
    if unbatched:
        grid = grid.unsqueeze(0)
        points = points.unsqueeze(0)
    if grid.dim() != 4 or points.shape[-1] != 2 or points.shape[0] != grid.shape[0]:
        raise ValueError(f"incompatible shapes: grid {tuple(grid.shape)}, points {tuple(points.shape)}")

    B, C, H, W = grid.shape
    lead = points.shape[1:-1]
    pts = points.reshape(B, -1, 2).to(grid.dtype)
    x, y = pts[..., 0], pts[..., 1]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = grid.reshape(B, C, H * W)

    def tap(xi, yi):
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).unsqueeze(1).expand(B, C, -1)
        vals = torch.gather(flat, 2, idx)
        return vals * valid.unsqueeze(1).to(grid.dtype)

    out = (
        tap(x0, y0) * ((1 - fx) * (1 - fy)).unsqueeze(1)
        + tap(x0 + 1, y0) * (fx * (1 - fy)).unsqueeze(1)
        + tap(x0, y0 + 1) * ((1 - fx) * fy).unsqueeze(1)
        + tap(x0 + 1, y0 + 1) * (fx * fy).unsqueeze(1)
    )
    if counter is not None:
        counter.add(4 * C * pts.shape[1] * B)
    out = out.transpose(1, 2).reshape(B, *lead, C)
    return out[0] if unbatched else out


def softmax(x: torch.Tensor, t: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Temperature softmax, ``exp((x - max x) / t)`` normalised along ``dim``."""
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t}")
    z = (x - x.amax(dim=dim, keepdim=True)) / t
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def patch_coordinates(width: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """``(W, W, 2)`` grid of ``(dx, dy)`` offsets centred on the middle pixel."""
    if width % 2 != 1:
        raise ValueError(f"window width must be odd, got {width}")
    r = width // 2
    ar = torch.arange(-r, r + 1, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ar, ar, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def softargmax(patch: torch.Tensor, t: float) -> torch.Tensor:
    """Expected ``(dx, dy)`` offset under ``softmax(patch / t)`` over ``(..., W, W)`` patches."""
    w = patch.shape[-1]
    if patch.shape[-2] != w or w % 2 != 1:
        raise ValueError(f"patch must be square with odd width, got {tuple(patch.shape[-2:])}")
    coords = patch_coordinates(w, dtype=patch.dtype, device=patch.device).reshape(-1, 2)
    prob = softmax(patch.reshape(*patch.shape[:-2], w * w), t)
    return prob @ coords


def nms(scores: torch.Tensor, radius: int) -> torch.Tensor:
    """Boolean mask of strict local maxima in ``(2r+1)^2`` windows.

    Accepts ``(H, W)`` or ``(B, 1, H, W)``. Plateaus are suppressed entirely
    because a pixel must beat every neighbour, not just match it.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    squeeze = scores.dim() == 2
    s = scores[None, None] if squeeze else scores
    k = 2 * radius + 1
    padded = F.pad(s, (radius,) * 4, value=float("-inf"))
    B, _, H, W = s.shape
    cols = F.unfold(padded, k).reshape(B, k * k, H, W)
    centre = (k * k) // 2
    neighbours = torch.cat([cols[:, :centre], cols[:, centre + 1:]], dim=1)
    mask = s > neighbours.amax(dim=1, keepdim=True)
    return mask[0, 0] if squeeze else mask


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None,
           stride: int = 1, padding: int = 0, counter=None) -> torch.Tensor:
    """Cross-correlation with zero padding; ``weight`` is ``(C_out, C_in, K, K)``."""
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    out = F.conv2d(x, weight, bias, stride=stride, padding=padding)
    if counter is not None:
        c_out, c_in, kh, kw = weight.shape
        counter.add(out.shape[0] * out.shape[2] * out.shape[3] * c_out * c_in * kh * kw)
    return out[0] if unbatched else out


def kernel_taps(k: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """Regular ``K x K`` sampling grid as ``(K*K, 2)`` offsets in raster order."""
    return patch_coordinates(k, dtype=dtype, device=device).reshape(-1, 2)


def dcn_conv(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor],
             offsets: torch.Tensor, counter=None) -> torch.Tensor:
    """Deformable convolution (stride 1, "same" output size).

    Output pixel ``p`` gathers ``x`` at ``p + p_i + offsets[..., i, :]`` for each
    of the ``K*K`` taps ``p_i`` (raster order), bilinearly, then contracts with
    ``weight``. ``offsets`` is ``(H, W, K*K, 2)`` or ``(B, H, W, K*K, 2)``.
    """
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
        offsets = offsets.unsqueeze(0)
    B, C, H, W = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c_in != C or k != k2 or k % 2 != 1:
        raise ValueError(f"kernel {tuple(weight.shape)} incompatible with input {tuple(x.shape)}")
    if offsets.shape != (B, H, W, k * k, 2):
        raise ValueError(f"offsets must be {(B, H, W, k * k, 2)}, got {tuple(offsets.shape)}")

    ys, xs = torch.meshgrid(
        torch.arange(H, dtype=x.dtype, device=x.device),
        torch.arange(W, dtype=x.dtype, device=x.device),
        indexing="ij",
    )
    base = torch.stack([xs, ys], dim=-1)[None, :, :, None, :]
    pos = base + kernel_taps(k, dtype=x.dtype, device=x.device) + offsets.to(x.dtype)
    cols = bilinear_sample(x, pos, counter=counter)  # (B, H, W, K*K, C)
    out = torch.einsum("bhwkc,ock->bohw", cols, weight.reshape(c_out, c_in, k * k))
    if counter is not None:
        counter.add(B * H * W * c_out * c_in * k * k)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out[0] if unbatched else out


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-6,
               indices: Optional[Sequence[int]] = None) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over coordinates.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor. ``indices``
    restricts the finite differences to a subset of flattened coordinates.
    """
    x = x.detach().clone().requires_grad_(True)
    y = f(x)
    (g,) = torch.autograd.grad(y, x, allow_unused=True)
    if g is None:
        g = torch.zeros_like(x)
    g = g.reshape(-1)
    flat = x.detach().reshape(-1)
    idx = range(flat.numel()) if indices is None else indices
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            xp = flat.clone()
            xp[i] += eps
            xm = flat.clone()
            xm[i] -= eps
            fd = (f(xp.view_as(x)) - f(xm.view_as(x))).item() / (2 * eps)
            a = g[i].item()
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
