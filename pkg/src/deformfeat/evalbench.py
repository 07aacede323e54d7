"""Matching and measurement: mutual-NN matching, MMA / MHA / MS / repeatability
and RANSAC homography estimation.

Works on numpy arrays (float64). Keypoints are ``(N, 2)`` ``(x, y)`` pixels and
homographies are 3x3 arrays mapping image A to image B.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np


@dataclass
class MatchSet:
    pairs: np.ndarray       # (K, 2) int
    similarity: np.ndarray  # (K,)

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass
class MetricReport:
    mma: float
    mha: Optional[float]
    ms: float
    repeatability: float
    threshold: float
    putative: int
    correct: int
    covisible_A: int
    covisible_B: int
    flags: List[str] = field(default_factory=list)
    mha_aggregation: str = "mean corner displacement"

    def to_dict(self) -> dict:
        return asdict(self)


def _np(a) -> np.ndarray:
    if hasattr(a, "detach"):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def warp_points(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = _np(pts).reshape(-1, 2)
    ph = np.c_[pts, np.ones(len(pts))] @ np.asarray(H, dtype=np.float64).T
    return ph[:, :2] / ph[:, 2:3]


def mnn_match(D_A, D_B) -> MatchSet:
    """Pairs that are each other's highest-similarity candidate (lower index on ties)."""
    D_A, D_B = _np(D_A), _np(D_B)
    if len(D_A) == 0 or len(D_B) == 0:
        return MatchSet(np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    sim = D_A @ D_B.T
    nn12 = np.argmax(sim, axis=1)
    nn21 = np.argmax(sim, axis=0)
    ids = np.arange(len(D_A))
    mutual = nn21[nn12] == ids
    pairs = np.stack([ids[mutual], nn12[mutual]], axis=1)
    return MatchSet(pairs.astype(np.int64), sim[pairs[:, 0], pairs[:, 1]])


def match_errors(m: MatchSet, kpts_A, kpts_B, H) -> np.ndarray:
    """Reprojection error in image B of every match."""
    if len(m) == 0:
        return np.zeros(0)
    a = _np(kpts_A)[m.pairs[:, 0]]
    b = _np(kpts_B)[m.pairs[:, 1]]
    return np.linalg.norm(warp_points(H, a) - b, axis=1)


def mma(m: MatchSet, kpts_A, kpts_B, H, th: float = 3.0) -> float:
    """Fraction of putative matches whose reprojection error is below ``th``; 0 if none."""
    if len(m) == 0:
        return 0.0
    return float(np.mean(match_errors(m, kpts_A, kpts_B, H) < th))


def _inside(pts: np.ndarray, shape) -> np.ndarray:
    h, w = shape[:2]
    return (pts[:, 0] >= 0) & (pts[:, 1] >= 0) & (pts[:, 0] <= w - 1) & (pts[:, 1] <= h - 1)


def covisible(kpts_A, kpts_B, H, shape_A, shape_B):
    a, b = _np(kpts_A).reshape(-1, 2), _np(kpts_B).reshape(-1, 2)
    vis_a = _inside(warp_points(H, a), shape_B) if len(a) else np.zeros(0, bool)
    vis_b = _inside(warp_points(np.linalg.inv(H), b), shape_A) if len(b) else np.zeros(0, bool)
    return vis_a, vis_b


def matching_score(m: MatchSet, kpts_A, kpts_B, H, shape_A, shape_B, th: float = 3.0) -> float:
    """Correct matches over ``min(#covisible_A, #covisible_B)``; 0 if nothing is covisible."""
    vis_a, vis_b = covisible(kpts_A, kpts_B, H, shape_A, shape_B)
    denom = min(int(vis_a.sum()), int(vis_b.sum()))
    if denom == 0:
        return 0.0
    correct = int(np.sum(match_errors(m, kpts_A, kpts_B, H) < th))
    return correct / denom


def repeatability(kpts_A, kpts_B, H, shape_A, shape_B, th: float = 3.0) -> float:
    """Covisible keypoints with a keypoint of the other image within ``th`` after
    warping, as a fraction per direction, averaged over both directions."""
    a, b = _np(kpts_A).reshape(-1, 2), _np(kpts_B).reshape(-1, 2)
    vis_a, vis_b = covisible(a, b, H, shape_A, shape_B)
    if len(a) == 0 or len(b) == 0:
        return 0.0
    fr = []
    for src, dst, vis, h in ((a, b, vis_a, H), (b, a, vis_b, np.linalg.inv(H))):
        if vis.sum() == 0:
            fr.append(0.0)
            continue
        w = warp_points(h, src[vis])
        d = np.linalg.norm(w[:, None, :] - dst[None, :, :], axis=-1).min(axis=1)
        fr.append(float(np.mean(d < th)))
    return 0.5 * (fr[0] + fr[1])


def image_corners(shape) -> np.ndarray:
    h, w = shape[:2]
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def corner_error(H_est, H_gt, shape) -> float:
    """Mean displacement of the four image corners between two homographies."""
    c = image_corners(shape)
    return float(np.mean(np.linalg.norm(warp_points(H_est, c) - warp_points(H_gt, c), axis=1)))


def homography_correct(H_est, H_gt, shape, th: float = 3.0) -> bool:
    if H_est is None:
        return False
    return corner_error(H_est, H_gt, shape) < th


def mha(H_est: Sequence, H_gt: Sequence, shapes: Sequence, th: float = 3.0) -> float:
    """Fraction of pairs whose estimated homography is correct; ``None`` estimates count as wrong."""
    if len(H_gt) == 0:
        return 0.0
    ok = [homography_correct(e, g, s, th) for e, g, s in zip(H_est, H_gt, shapes)]
    return float(np.mean(ok))


# ---------------------------------------------------------------------------
# homography estimation
# ---------------------------------------------------------------------------

def _normalise(pts: np.ndarray):
    mean = pts.mean(axis=0)
    d = np.linalg.norm(pts - mean, axis=1).mean()
    s = np.sqrt(2) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1]])
    return (pts - mean) * s, T


def _collinear(pts: np.ndarray, tol: float = 1e-6) -> bool:
    if len(pts) < 3:
        return True
    c = pts - pts.mean(axis=0)
    sv = np.linalg.svd(c, compute_uv=False)
    return sv[1] <= tol * max(sv[0], 1e-12)


def _degenerate_sample(pts: np.ndarray) -> bool:
    for i in range(4):
        tri = np.delete(pts, i, axis=0)
        a, b, c = tri
        area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area < 1e-6:
            return True
    return False


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> Optional[np.ndarray]:
    """Normalised DLT; ``None`` for fewer than 4 points or a degenerate fit."""
    if len(src) < 4 or _collinear(src) or _collinear(dst):
        return None
    s, Ts = _normalise(src)
    d, Td = _normalise(dst)
    A = np.zeros((2 * len(s), 9))
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    A[0::2, 0:3] = np.c_[x, y, np.ones_like(x)]
    A[0::2, 6:9] = -u[:, None] * np.c_[x, y, np.ones_like(x)]
    A[1::2, 3:6] = np.c_[x, y, np.ones_like(x)]
    A[1::2, 6:9] = -v[:, None] * np.c_[x, y, np.ones_like(x)]
    _, _, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-12 or not np.all(np.isfinite(H)):
        return None
    H = H / H[2, 2]
    if abs(np.linalg.det(H)) < 1e-12:
        return None
    return H


@dataclass
class HomographyEstimate:
    H: Optional[np.ndarray]   # None when estimation failed
    inliers: np.ndarray       # (K,) bool over the input matches


def estimate_homography(src, dst, threshold: float = 3.0, iterations: int = 2000,
                        seed: int = 0) -> HomographyEstimate:
    """RANSAC over minimal 4-point DLT fits, then a DLT refit on all inliers.

    Inliers have forward transfer error below ``threshold`` pixels.
    """
    src, dst = _np(src).reshape(-1, 2), _np(dst).reshape(-1, 2)
    n = len(src)
    fail = HomographyEstimate(None, np.zeros(n, dtype=bool))
    if n < 4 or _collinear(src) or _collinear(dst):
        return fail
    rng = np.random.default_rng(seed)
    best, best_count, best_err = None, 0, np.inf
    for _ in range(iterations):
        idx = rng.choice(n, size=4, replace=False)
        if _degenerate_sample(src[idx]) or _degenerate_sample(dst[idx]):
            continue
        H = dlt_homography(src[idx], dst[idx])
        if H is None:
            continue
        with np.errstate(all="ignore"):
            err = np.linalg.norm(warp_points(H, src) - dst, axis=1)
        err = np.where(np.isfinite(err), err, np.inf)
        inl = err < threshold
        count = int(inl.sum())
        if count < 4:
            continue
        mean_err = float(err[inl].mean())
        if count > best_count or (count == best_count and mean_err < best_err):
            best, best_count, best_err = inl, count, mean_err
    if best is None:
        return fail
    H = dlt_homography(src[best], dst[best])
    if H is None:
        return fail
    with np.errstate(all="ignore"):
        err = np.linalg.norm(warp_points(H, src) - dst, axis=1)
    inliers = np.isfinite(err) & (err < threshold)
    return HomographyEstimate(H, inliers)


def estimate_from_matches(m: MatchSet, kpts_A, kpts_B, **kw) -> HomographyEstimate:
    if len(m) == 0:
        return HomographyEstimate(None, np.zeros(0, dtype=bool))
    return estimate_homography(_np(kpts_A)[m.pairs[:, 0]], _np(kpts_B)[m.pairs[:, 1]], **kw)


def evaluate_pair(kpts_A, kpts_B, D_A, D_B, H_gt, shape_A, shape_B, th: float = 3.0,
                  ransac_seed: int = 0) -> MetricReport:
    m = mnn_match(D_A, D_B)
    errs = match_errors(m, kpts_A, kpts_B, H_gt)
    vis_a, vis_b = covisible(kpts_A, kpts_B, H_gt, shape_A, shape_B)
    flags = []
    if len(m) == 0:
        flags.append("no_matches")
    if min(vis_a.sum(), vis_b.sum()) == 0:
        flags.append("no_covisible")
    est = estimate_from_matches(m, kpts_A, kpts_B, seed=ransac_seed)
    if est.H is None:
        flags.append("homography_failed")
    return MetricReport(
        mma=mma(m, kpts_A, kpts_B, H_gt, th),
        mha=float(homography_correct(est.H, H_gt, shape_A, th)),
        ms=matching_score(m, kpts_A, kpts_B, H_gt, shape_A, shape_B, th),
        repeatability=repeatability(kpts_A, kpts_B, H_gt, shape_A, shape_B, th),
        threshold=th,
        putative=len(m),
        correct=int(np.sum(errs < th)),
        covisible_A=int(vis_a.sum()),
        covisible_B=int(vis_b.sum()),
        flags=flags,
    )


def aggregate(reports: Sequence[MetricReport]) -> dict:
    if not reports:
        return {"pairs": 0}
    keys = ("mma", "mha", "ms", "repeatability")
    out = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    out.update(pairs=len(reports), threshold=reports[0].threshold,
               mha_aggregation=reports[0].mha_aggregation)
    return out


def write_report(path, per_pair: Sequence[MetricReport], names: Optional[Sequence[str]] = None) -> dict:
    names = list(names) if names is not None else [str(i) for i in range(len(per_pair))]
    doc = {"aggregate": aggregate(per_pair),
           "pairs": [dict(name=n, **r.to_dict()) for n, r in zip(names, per_pair)]}
    Path(path).write_text(json.dumps(doc, indent=2))
    return doc


def format_table(per_pair: Sequence[MetricReport], names: Optional[Sequence[str]] = None) -> str:
    names = list(names) if names is not None else [str(i) for i in range(len(per_pair))]
    rows = [f"{'pair':<24} {'MMA':>7} {'MHA':>7} {'MS':>7} {'Rep':>7} {'#match':>7}"]
    for n, r in zip(names, per_pair):
        rows.append(f"{n:<24} {r.mma:7.3f} {r.mha:7.3f} {r.ms:7.3f} {r.repeatability:7.3f} {r.putative:7d}")
    agg = aggregate(per_pair)
    if per_pair:
        rows.append(f"{'mean':<24} {agg['mma']:7.3f} {agg['mha']:7.3f} {agg['ms']:7.3f} {agg['repeatability']:7.3f}")
    return "\n".join(rows)


def draw_matches(img_A: np.ndarray, img_B: np.ndarray, m: MatchSet, kpts_A, kpts_B, H, path,
                 max_error: float = 5.0) -> None:
    """Side-by-side overlay: green->yellow by reprojection error up to ``max_error``, red beyond."""
    from PIL import Image, ImageDraw

    def rgb(a):
        a = np.asarray(a, dtype=np.float64)
        if a.max() <= 1.0:
            a = a * 255
        a = a.clip(0, 255).astype(np.uint8)
        return np.repeat(a[..., None], 3, axis=2) if a.ndim == 2 else a

    a, b = rgb(img_A), rgb(img_B)
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1], 3), dtype=np.uint8)
    canvas[: a.shape[0], : a.shape[1]] = a
    canvas[: b.shape[0], a.shape[1]:] = b
    im = Image.fromarray(canvas)
    draw = ImageDraw.Draw(im)
    errs = match_errors(m, kpts_A, kpts_B, H)
    ka, kb = _np(kpts_A), _np(kpts_B)
    for (i, j), e in zip(m.pairs, errs):
        if e > max_error:
            col = (255, 0, 0)
        else:
            col = (int(255 * e / max_error), 255, 0)
        xa, ya = ka[i]
        xb, yb = kb[j]
        draw.line([(xa, ya), (xb + a.shape[1], yb)], fill=col, width=1)
    im.save(path)
