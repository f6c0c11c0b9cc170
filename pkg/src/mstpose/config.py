"""Training configuration: a flat ``key = value`` text file."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass
class TrainConfig:
    M: int = 4  # mixtures per sub-tree
    K_limb: int = 6  # types per limb part
    K_other: int = 4  # types per torso/head part
    C_subtree: float = 0.02
    C_full: float = 0.1
    rounds_subtree: int = 5
    rounds_full: int = 3
    epochs: int = 5  # SVM epochs per latent round
    t0: float = 10.0  # step size offset, eta_t = 1 / (t + t0)
    cell_size: int = 4
    interval: int = 4
    max_levels: int = 2  # 0 means no cap
    clip: float = 0.2
    seed: int = 0
    features: str = "both"  # descriptor block used for structure distances
    radius: int = 1  # latent completion search radius in cells
    neg_per_image: int = 3
    neg_cache: int = 600
    pose_negatives: int = 2  # mislocalised detections per positive image used as negatives (0 disables)
    pose_tol: float = 0.25  # mean part error, as a fraction of torso height, that counts as mislocalised
    mirror: bool = False
    rotations: str = ""  # comma-separated degrees
    threshold: float = -1.0
    occlusion_limit: int = 3
    occlusion_overlap: float = 0.5
    occlusion_threshold: float = -math.inf

    def rotation_list(self) -> list[float]:
        return [float(r) for r in self.rotations.split(",") if r.strip()]

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


def _convert(kind, raw: str, key: str):
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"config key '{key}': cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    types = {f.name: f.type for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key '{key}'")
        setattr(cfg, key, _convert(types[key], val, key))
    validate_config(cfg)
    return cfg


def load_config(path: str | Path | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return parse_config(Path(path).read_text())


def validate_config(cfg: TrainConfig) -> None:
    if cfg.M < 1 or cfg.K_limb < 1 or cfg.K_other < 1:
        raise ValueError("M, K_limb and K_other must be >= 1")
    if cfg.C_subtree < 0 or cfg.C_full < 0:
        raise ValueError("C values must be non-negative")
    if cfg.cell_size < 1 or cfg.interval < 1:
        raise ValueError("cell_size and interval must be >= 1")
    if cfg.features not in ("both", "appearance", "geometry"):
        raise ValueError("features must be both, appearance or geometry")
    if cfg.pose_negatives < 0 or cfg.pose_tol <= 0:
        raise ValueError("pose_negatives must be >= 0 and pose_tol positive")
    if cfg.t0 <= 0:
        raise ValueError("t0 must be positive")
    cfg.rotation_list()
