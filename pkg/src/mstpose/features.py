"""HOG feature pyramids and template correlation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image as PILImage
from scipy import ndimage

from .geometry import ScoreMap

NUM_ORIENTATIONS = 18
FEATURE_DIM = NUM_ORIENTATIONS + NUM_ORIENTATIONS // 2 + 4
DEFAULT_CLIP = 0.2
_NORM_EPS = 1e-4

_ANGLES = np.arange(NUM_ORIENTATIONS) * (2 * np.pi / NUM_ORIENTATIONS)
_UX = np.cos(_ANGLES)
_UY = np.sin(_ANGLES)


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG/PPM file into a float array in [0, 1], (H, W) or (H, W, 3)."""
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            return img[..., 0]
        return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    if img.ndim != 2:
        raise ValueError(f"unsupported image shape {img.shape}")
    return img


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray  # (rows, cols, dim)
    scale: float  # image pixels per cell
    level: int = 0

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple[FeatureMap, ...]
    interval: int
    cell_size: int
    image_shape: tuple[int, int]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> FeatureMap:
        return self.levels[i]


@dataclass
class PartTemplate:
    part_id: str
    type_id: int
    weights: np.ndarray  # (h, w, dim)
    bias: float = 0.0


def _orientation_histograms(gray: np.ndarray, cell_size: int) -> np.ndarray:
    padded = np.pad(gray, 1, mode="edge")
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    mag = np.hypot(gx, gy)
    dots = gx[..., None] * _UX + gy[..., None] * _UY
    best = np.argmax(dots, axis=-1)

    rows, cols = gray.shape[0] // cell_size, gray.shape[1] // cell_size
    h, w = rows * cell_size, cols * cell_size
    cell_y = np.arange(h) // cell_size
    cell_x = np.arange(w) // cell_size
    flat = (cell_y[:, None] * cols + cell_x[None, :]) * NUM_ORIENTATIONS + best[:h, :w]
    hist = np.bincount(flat.ravel(), weights=mag[:h, :w].ravel(),
                       minlength=rows * cols * NUM_ORIENTATIONS)
    return hist.reshape(rows, cols, NUM_ORIENTATIONS)


def compute_hog(image: np.ndarray, cell_size: int = 4, clip: float = DEFAULT_CLIP) -> np.ndarray:
    """31-dimensional cell descriptor (18 signed + 9 unsigned orientations + 4 energy terms).

    Each cell histogram is normalised against its four 2x2 blocks, clipped at
    ``clip`` and averaged, so every entry lies in [0, clip].
    """
    gray = to_gray(image)
    if gray.shape[0] < cell_size or gray.shape[1] < cell_size:
        raise ValueError(f"image {gray.shape} smaller than one {cell_size}px cell")
    hist = _orientation_histograms(gray, cell_size)
    half = NUM_ORIENTATIONS // 2
    hist9 = hist[..., :half] + hist[..., half:]
    energy = np.pad((hist9 ** 2).sum(axis=-1), 1)
    # block sums for the 2x2 blocks with top-left at each padded cell
    blocks = energy[:-1, :-1] + energy[1:, :-1] + energy[:-1, 1:] + energy[1:, 1:]
    norms = []
    for dy in (0, 1):
        for dx in (0, 1):
            b = blocks[dy:dy + hist.shape[0], dx:dx + hist.shape[1]]
            norms.append(1.0 / np.sqrt(b + _NORM_EPS))
    out = np.zeros(hist.shape[:2] + (FEATURE_DIM,))
    for k, n in enumerate(norms):
        sens = np.minimum(hist * n[..., None], clip)
        out[..., :NUM_ORIENTATIONS] += 0.25 * sens
        out[..., NUM_ORIENTATIONS:NUM_ORIENTATIONS + half] += 0.25 * np.minimum(hist9 * n[..., None], clip)
        out[..., NUM_ORIENTATIONS + half + k] = sens.mean(axis=-1)
    return out


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] == (height, width):
        return img.copy()
    sy = img.shape[0] / height
    sx = img.shape[1] / width
    yy = (np.arange(height) + 0.5) * sy - 0.5
    xx = (np.arange(width) + 0.5) * sx - 0.5
    coords = np.meshgrid(yy, xx, indexing="ij")
    if img.ndim == 2:
        return ndimage.map_coordinates(img, coords, order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(img[..., c], coords, order=1, mode="nearest")
                     for c in range(img.shape[2])], axis=-1)


def build_pyramid(image: np.ndarray, interval: int = 4, min_level_cells: int = 4,
                  cell_size: int = 4, clip: float = DEFAULT_CLIP,
                  max_levels: int | None = None) -> FeaturePyramid:
    """HOG maps at scales 2^(-l/interval), finest first.

    Level 0 is always produced; coarser levels stop once either grid
    dimension would drop below ``min_level_cells``.
    """
    if interval < 1:
        raise ValueError("interval must be >= 1")
    gray = to_gray(image)
    H, W = gray.shape
    levels = []
    lvl = 0
    while max_levels is None or lvl < max_levels:
        s = 2.0 ** (-lvl / interval)
        h, w = int(round(H * s)), int(round(W * s))
        if lvl > 0 and (h // cell_size < min_level_cells or w // cell_size < min_level_cells):
            break
        scaled = gray if lvl == 0 else resize_bilinear(gray, h, w)
        levels.append(FeatureMap(compute_hog(scaled, cell_size, clip), cell_size / s, lvl))
        lvl += 1
    return FeaturePyramid(tuple(levels), interval, cell_size, (H, W))


def correlate_template(fmap: FeatureMap | np.ndarray, tpl: PartTemplate) -> ScoreMap:
    """Valid-region cross-correlation of a template with a feature map, plus bias."""
    data = fmap.data if isinstance(fmap, FeatureMap) else np.asarray(fmap)
    level = fmap.level if isinstance(fmap, FeatureMap) else 0
    scale = fmap.scale if isinstance(fmap, FeatureMap) else 1.0
    h, w, d = tpl.weights.shape
    if d != data.shape[2]:
        raise ValueError(f"template dim {d} != feature dim {data.shape[2]}")
    if h > data.shape[0] or w > data.shape[1]:
        return ScoreMap(tpl.part_id, level, np.zeros((1, 0, 0)), scale, (h, w), valid=False)
    win = sliding_window_view(data, (h, w), axis=(0, 1))  # (R, C, d, h, w)
    resp = np.einsum("rcdhw,hwd->rc", win, tpl.weights, optimize=True) + tpl.bias
    return ScoreMap(tpl.part_id, level, resp[None], scale, (h, w))


def pad_features(data: np.ndarray, h: int, w: int) -> np.ndarray:
    """Zero-pad so a centred (h, w) template yields an output of the input's size."""
    return np.pad(data, ((h // 2, (h - 1) // 2), (w // 2, (w - 1) // 2), (0, 0)))


def feature_patch(data: np.ndarray, y: int, x: int, h: int, w: int) -> np.ndarray:
    """Feature block of a centred (h, w) template at cell (y, x), zero outside the map."""
    padded = pad_features(data, h, w)
    return padded[y:y + h, x:x + w]
