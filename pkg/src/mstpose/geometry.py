"""Axis-aligned boxes, overlap and greedy non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"invalid box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    @classmethod
    def around(cls, cx: float, cy: float, width: float, height: float) -> "Box":
        return cls(cx - width / 2, cy - height / 2, cx + width / 2, cy + height / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes or a zero union."""
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) arrays of (x0, y0, x1, y1)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0) & (inter > 0))
    return out


@dataclass
class ScoreMap:
    """Dense per-type score grid of one node at one pyramid level.

    ``scale`` is the image-pixel size of one cell and ``extent`` the node's
    box size in cells, so grid location (y, x) maps to a box centred on the
    cell.
    """

    node: str
    level: int
    scores: np.ndarray  # (K, H, W)
    scale: float = 1.0
    extent: tuple[int, int] = (1, 1)
    valid: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape[1], self.scores.shape[2]

    def box_at(self, y: int, x: int) -> Box:
        return cell_box(y, x, self.scale, self.extent)


def cell_box(y: float, x: float, scale: float, extent: tuple[int, int]) -> Box:
    h, w = extent
    return Box.around((x + 0.5) * scale, (y + 0.5) * scale, w * scale, h * scale)


@dataclass(frozen=True)
class Candidate:
    part_id: str
    location: tuple[int, int]  # (y, x) grid cell
    pyramid_level: int
    type_id: int
    score: float
    box: Box
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def order_key(self):
        return (-self.score, self.pyramid_level, self.location[0], self.location[1], self.type_id)


def map_candidates(smap: ScoreMap, score_threshold: float) -> list[Candidate]:
    """Best type per location, restricted to finite scores >= threshold."""
    if smap.scores.size == 0 or not smap.valid:
        return []
    best_type = np.argmax(smap.scores, axis=0)
    best = np.take_along_axis(smap.scores, best_type[None], axis=0)[0]
    ys, xs = np.nonzero(np.isfinite(best) & (best >= score_threshold))
    return [
        Candidate(smap.node, (int(y), int(x)), smap.level, int(best_type[y, x]),
                  float(best[y, x]), smap.box_at(y, x))
        for y, x in zip(ys, xs)
    ]


def nms_candidates(cands: list[Candidate], overlap_threshold: float,
                   limit: int | None = None) -> list[Candidate]:
    """Greedy suppression of candidates overlapping a better one by more than the threshold.

    Equal scores are ordered by (level, y, x, type).
    """
    if not 0.0 <= overlap_threshold <= 1.0:
        raise ValueError("overlap_threshold must lie in [0, 1]")
    order = sorted(cands, key=lambda c: c.order_key)
    if not order:
        return []
    boxes = np.array([c.box.as_tuple() for c in order])
    alive = np.ones(len(order), dtype=bool)
    keep: list[Candidate] = []
    for i, cand in enumerate(order):
        if not alive[i]:
            continue
        keep.append(cand)
        if limit is not None and len(keep) >= limit:
            break
        rest = np.nonzero(alive[i + 1:])[0] + i + 1
        if rest.size:
            ov = iou_matrix(boxes[i], boxes[rest])[0]
            alive[rest[ov > overlap_threshold]] = False
    return keep


def nms(smap: ScoreMap, score_threshold: float, overlap_threshold: float = 0.5,
        limit: int | None = None) -> list[Candidate]:
    """Non-maximum suppression over a score map, best first."""
    if not 0.0 <= overlap_threshold <= 1.0:
        raise ValueError("overlap_threshold must lie in [0, 1]")
    return nms_candidates(map_candidates(smap, score_threshold), overlap_threshold, limit)
