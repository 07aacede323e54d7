"""Image pairs: procedural textures, synthetic homography pairs and dataset folders.

Dataset layouts understood by :func:`ingest`:

* homography scenes (HPatches style)::

      root/<scene>/1.ppm ... 6.ppm
      root/<scene>/H_1_2 ... H_1_6     # 3x3 text matrices mapping 1 -> N

* pose scenes::

      root/<scene>/pairs.txt            # lines: "<image_A> <image_B> <gt.npz>"
      root/<scene>/<gt.npz>             # R_AB, t_AB, K_A, K_B, depth_A, depth_B

An optional ``root/<scene>/split`` file holds the split tag (default: the
scene-name prefix ``i``/``v`` for HPatches scenes, else ``train``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import cv2
import numpy as np
import torch

from ..numerics import bilinear_sample
from ..geometry import GeometryError, Homography, RelativePose, read_homography, write_homography

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".ppm", ".png", ".jpg", ".jpeg", ".pgm")


# ---------------------------------------------------------------------------
# procedural images
# ---------------------------------------------------------------------------

def procedural_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Grey-level ``(size, size)`` float image in [0, 1] with blobs, edges and corners."""
    low = rng.random((max(2, size // 16),) * 2)
    img = cv2.resize(low, (size, size), interpolation=cv2.INTER_CUBIC) * 0.4 + 0.3
    n_shapes = int(rng.integers(6, 14))
    for _ in range(n_shapes):
        val = float(rng.random())
        kind = rng.integers(0, 4)
        p = rng.integers(0, size, 2)
        if kind == 0:
            q = p + rng.integers(3, max(4, size // 3), 2)
            cv2.rectangle(img, (int(p[0]), int(p[1])), (int(q[0]), int(q[1])), val, -1)
        elif kind == 1:
            cv2.circle(img, (int(p[0]), int(p[1])), int(rng.integers(2, max(3, size // 6))), val, -1)
        elif kind == 2:
            q = rng.integers(0, size, 2)
            cv2.line(img, (int(p[0]), int(p[1])), (int(q[0]), int(q[1])), val, int(rng.integers(1, 3)))
        else:
            pts = (p + rng.integers(-size // 5, size // 5 + 1, (int(rng.integers(3, 6)), 2))).astype(np.int32)
            cv2.fillPoly(img, [pts], val)
    img = cv2.GaussianBlur(img, (3, 3), 0.7)
    return np.clip(img, 0.0, 1.0)


def to_rgb(gray: np.ndarray) -> np.ndarray:
    return np.repeat(gray[..., None], 3, axis=2) if gray.ndim == 2 else gray


# ---------------------------------------------------------------------------
# synthetic pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairParams:
    max_rotation: float = 25.0      # degrees
    min_scale: float = 0.8
    max_scale: float = 1.25
    max_shear: float = 0.1
    max_perspective: float = 5e-4   # 1/pixel
    max_translation: float = 0.0    # fraction of the image size
    photometric: float = 0.1        # brightness offset / contrast spread
    noise: float = 0.02             # gaussian noise sigma

    @classmethod
    def zero(cls) -> "PairParams":
        return cls(0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def mild(cls) -> "PairParams":
        return cls(10.0, 0.9, 1.1, 0.05, 2e-4, 0.0, 0.05, 0.01)


def random_homography(shape, p: PairParams, rng: np.random.Generator, retries: int = 20) -> Homography:
    """Rotation, scale, shear and perspective about the image centre, plus translation."""
    h, w = shape[:2]
    c = np.array([(w - 1) / 2, (h - 1) / 2])
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    for _ in range(retries):
        theta = math.radians(rng.uniform(-p.max_rotation, p.max_rotation))
        s = math.exp(rng.uniform(math.log(p.min_scale), math.log(p.max_scale)))
        sh = rng.uniform(-p.max_shear, p.max_shear)
        px, py = rng.uniform(-p.max_perspective, p.max_perspective, 2)
        t = rng.uniform(-p.max_translation, p.max_translation, 2) * np.array([w, h])
        R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        A = R @ np.array([[s, sh], [0.0, s]])
        core = np.eye(3)
        core[:2, :2] = A
        core[2, :2] = [px, py]
        T_in = np.array([[1, 0, -c[0]], [0, 1, -c[1]], [0, 0, 1.0]])
        T_out = np.array([[1, 0, c[0] + t[0]], [0, 1, c[1] + t[1]], [0, 0, 1.0]])
        H = T_out @ core @ T_in
        wz = np.c_[corners, np.ones(4)] @ H.T
        if np.all(wz[:, 2] > 0.1) and abs(np.linalg.det(H)) > 1e-6:
            try:
                return Homography(H)
            except GeometryError:
                continue
    raise GeometryError(f"no valid homography after {retries} draws")


def warp_image(img: np.ndarray, H: Homography, shape=None) -> np.ndarray:
    """Resample ``img`` into the frame of ``H``: ``B(q) = A(H^-1 q)``, bilinear, zero outside."""
    h, w = (shape or img.shape)[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    q = torch.from_numpy(np.stack([xs, ys], axis=-1).astype(np.float64))
    src = H.inverse()(q)
    grid = torch.from_numpy(np.asarray(img, dtype=np.float64))
    grid = grid[None] if grid.dim() == 2 else grid.permute(2, 0, 1)
    out = bilinear_sample(grid, src)
    return (out[..., 0] if img.ndim == 2 else out).numpy()


def photometric_jitter(img: np.ndarray, p: PairParams, rng: np.random.Generator) -> np.ndarray:
    if p.photometric == 0 and p.noise == 0:
        return img.copy()
    contrast = 1.0 + rng.uniform(-p.photometric, p.photometric)
    brightness = rng.uniform(-p.photometric, p.photometric)
    out = (img - 0.5) * contrast + 0.5 + brightness
    if p.noise > 0:
        out = out + rng.normal(0.0, p.noise, img.shape)
    return np.clip(out, 0.0, 1.0)


@dataclass
class ImagePair:
    image_A: np.ndarray
    image_B: np.ndarray
    H: Homography           # maps pixels of A to pixels of B


def synth_pair(img: np.ndarray, rng: np.random.Generator, params: PairParams = PairParams()) -> ImagePair:
    if min(img.shape[:2]) < 8:
        raise ValueError("image too small for a synthetic pair")
    H = random_homography(img.shape, params, rng)
    warped = warp_image(img, H)
    return ImagePair(img.copy(), photometric_jitter(warped, params, rng), H)


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

@dataclass
class DatasetEntry:
    image_A: Path
    image_B: Path
    gt: Union[Homography, RelativePose]
    split: str
    name: str


def read_image(path) -> np.ndarray:
    """RGB float image in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise IOError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def write_image(path, img: np.ndarray) -> None:
    a = np.clip(np.round(to_rgb(img) * 255), 0, 255).astype(np.uint8)
    cv2.imwrite(str(path), cv2.cvtColor(a, cv2.COLOR_RGB2BGR))


def _find_image(scene: Path, stem: str):
    for suf in IMAGE_SUFFIXES:
        p = scene / f"{stem}{suf}"
        if p.exists():
            return p
    return None


def _split_of(scene: Path) -> str:
    f = scene / "split"
    if f.exists():
        return f.read_text().strip()
    prefix = scene.name.split("_", 1)[0]
    return prefix if prefix in ("i", "v") else "train"


def _ingest_homography_scene(scene: Path) -> List[DatasetEntry]:
    out = []
    ref = _find_image(scene, "1")
    if ref is None:
        log.warning("skipping scene %s: reference image 1 missing", scene.name)
        return out
    for n in range(2, 7):
        img = _find_image(scene, str(n))
        hfile = scene / f"H_1_{n}"
        if img is None:
            log.warning("skipping %s pair 1-%d: image %d missing", scene.name, n, n)
            continue
        if not hfile.exists():
            log.warning("skipping %s pair 1-%d: %s missing", scene.name, n, hfile.name)
            continue
        try:
            H = read_homography(hfile)
        except (ValueError, GeometryError) as e:
            log.warning("skipping %s pair 1-%d: bad homography (%s)", scene.name, n, e)
            continue
        out.append(DatasetEntry(ref, img, H, _split_of(scene), f"{scene.name}/1-{n}"))
    return out


def _ingest_pose_scene(scene: Path) -> List[DatasetEntry]:
    out = []
    for lineno, line in enumerate((scene / "pairs.txt").read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            log.warning("skipping %s/pairs.txt line %d: expected 3 fields", scene.name, lineno)
            continue
        a, b, gt = (scene / x for x in parts)
        missing = [x.name for x in (a, b, gt) if not x.exists()]
        if missing:
            log.warning("skipping %s line %d: missing %s", scene.name, lineno, ", ".join(missing))
            continue
        try:
            with np.load(gt) as z:
                pose = RelativePose(z["R_AB"], z["t_AB"], z["K_A"], z["K_B"], z["depth_A"], z["depth_B"])
        except (KeyError, ValueError, GeometryError, OSError) as e:
            log.warning("skipping %s line %d: bad pose file (%s)", scene.name, lineno, e)
            continue
        out.append(DatasetEntry(a, b, pose, _split_of(scene), f"{scene.name}/{a.stem}-{b.stem}"))
    return out


def ingest(root) -> List[DatasetEntry]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    entries: List[DatasetEntry] = []
    for scene in sorted(p for p in root.iterdir() if p.is_dir()):
        if (scene / "pairs.txt").exists():
            entries.extend(_ingest_pose_scene(scene))
        else:
            entries.extend(_ingest_homography_scene(scene))
    return entries


def export_homography_scene(root, name: str, images, homographies, split: str | None = None) -> Path:
    """Write a scene in the HPatches layout: 6 images and 5 matrices ``H_1_N``."""
    if len(images) != 6 or len(homographies) != 5:
        raise ValueError("a homography scene has 6 images and 5 homographies")
    scene = Path(root) / name
    scene.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images, 1):
        write_image(scene / f"{i}.ppm", img)
    for n, H in enumerate(homographies, 2):
        write_homography(scene / f"H_1_{n}", H)
    if split is not None:
        (scene / "split").write_text(split + "\n")
    return scene


def export_pose_pair(root, scene_name: str, image_A, image_B, pose: RelativePose, stem: str) -> Path:
    scene = Path(root) / scene_name
    scene.mkdir(parents=True, exist_ok=True)
    write_image(scene / f"{stem}_A.png", image_A)
    write_image(scene / f"{stem}_B.png", image_B)
    np.savez(scene / f"{stem}.npz", **{k: getattr(pose, k).numpy() for k in
                                       ("R_AB", "t_AB", "K_A", "K_B", "depth_A", "depth_B")})
    with open(scene / "pairs.txt", "a") as f:
        f.write(f"{stem}_A.png {stem}_B.png {stem}.npz\n")
    return scene


def synthetic_scene(size: int, rng: np.random.Generator, params: PairParams = PairParams()) -> Tuple[list, list]:
    """Reference image plus five warped views, HPatches style."""
    ref = procedural_image(size, rng)
    imgs, Hs = [ref], []
    for _ in range(5):
        pair = synth_pair(ref, rng, params)
        imgs.append(pair.image_B)
        Hs.append(pair.H)
    return imgs, Hs
