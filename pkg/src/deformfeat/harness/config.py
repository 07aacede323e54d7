"""Training configuration and its flat ``key = value`` file format.

Example file::

    # micro run
    variant = micro
    M = 8
    steps = 2000
    image_size = 64
    lr = 1e-3

Blank lines and ``#`` comments are ignored. Unknown keys are an error.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..backbone import NetConfig
from ..dkd import DetectionConfig
from ..losses import LossWeights, Temperatures


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "N"
    M: int = 16
    K: int = 3
    steps: int = 1000
    batch_size: int = 2
    accumulation: int = 6
    image_size: int = 800
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    th_gt: float = 5.0
    w_rp: float = 1.0
    w_pk: float = 0.5
    w_ds: float = 5.0
    w_re: float = 1.0
    t_det: float = 0.1
    t_des: float = 0.1
    t_rel: float = 1.0
    radius: int = 2
    n_detected: int = 400
    n_random: int = 400
    stop_gradients: bool = True  # descriptor positions and reliabilities carry no gradient
    # synthetic pair generator
    pool_size: int = 64
    max_rotation: float = 25.0
    min_scale: float = 0.8
    max_scale: float = 1.25
    max_shear: float = 0.1
    max_perspective: float = 5e-4
    max_translation: float = 0.0
    photometric: float = 0.1
    noise: float = 0.02
    dtype: str = "float32"
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("M", "K", "steps", "batch_size", "accumulation", "image_size", "radius"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.image_size % 32:
            raise ValueError("image_size must be a multiple of 32")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.net  # validates the variant

    @property
    def net(self) -> NetConfig:
        return NetConfig.preset(self.variant)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_rp, self.w_pk, self.w_ds, self.w_re)

    @property
    def temperatures(self) -> Temperatures:
        return Temperatures(self.t_det, self.t_des, self.t_rel)

    @property
    def detection(self) -> DetectionConfig:
        return DetectionConfig(radius=self.radius, score_threshold=0.0, top_k=self.n_detected, t_det=self.t_det)

    def updated(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def _coerce(kind, raw: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def parse_config(text: str) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(types[key], raw)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))
