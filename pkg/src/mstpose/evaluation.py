"""Annotation manifests, augmentation, PCP scoring and evaluation reports."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from . import layout

log = logging.getLogger(__name__)

MAGIC = "MSTPOSE-MANIFEST"
MAX_ROTATION = 15.0
PCP_ALPHA = 0.5


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    path: str
    points: np.ndarray | None  # (26, 2) x, y; None marks a negative image
    mirror: bool = False
    rotation: float = 0.0  # degrees, applied after mirroring, about the image centre
    size: tuple[int, int] | None = None  # (height, width) when known

    @property
    def negative(self) -> bool:
        return self.points is None

    def flag(self) -> str:
        f = "neg" if self.negative else "pos"
        if self.mirror:
            f += "|mirror"
        if self.rotation != 0.0:
            f += f"|rot={self.rotation!r}"
        return f


@dataclass
class Manifest:
    name: str
    split: str
    entries: list[ManifestEntry]
    limbs: tuple = layout.LIMBS
    root: Path = field(default_factory=Path)

    @property
    def positives(self) -> list[ManifestEntry]:
        return [e for e in self.entries if not e.negative]

    @property
    def negatives(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.negative]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p


def _limb_table(limbs) -> str:
    return ",".join(f"{name}:{'+'.join(a)}-{'+'.join(b)}" for name, a, b in limbs)


def _parse_limbs(text: str, lineno: int) -> tuple:
    out = []
    for item in text.split(","):
        try:
            name, ends = item.split(":")
            a, b = ends.split("-")
        except ValueError:
            raise ManifestError(f"line {lineno}: malformed limb '{item}'") from None
        pa, pb = tuple(a.split("+")), tuple(b.split("+"))
        for p in pa + pb:
            if p not in layout.PART_INDEX:
                raise ManifestError(f"line {lineno}: limb '{name}' names unknown part '{p}'")
        out.append((name, pa, pb))
    return tuple(out)


def write_manifest(path: str | Path, manifest: Manifest, comments=()) -> None:
    lines = [f"# {c}" for c in comments]
    lines.append(f"{MAGIC} parts={layout.NUM_PARTS} name={manifest.name} split={manifest.split} "
                 f"limbs={_limb_table(manifest.limbs)}")
    for e in manifest.entries:
        if any(ch.isspace() for ch in e.path):
            raise ManifestError(f"path with whitespace cannot be written: {e.path!r}")
        row = [e.path, e.flag()]
        if not e.negative:
            row += [repr(float(v)) for v in np.asarray(e.points, dtype=float).ravel()]
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_flag(flag: str, lineno: int) -> tuple[bool, bool, float]:
    bits = flag.split("|")
    if bits[0] not in ("pos", "neg"):
        raise ManifestError(f"line {lineno}: flag must start with pos or neg, got '{flag}'")
    mirror, rot = False, 0.0
    for b in bits[1:]:
        if b == "mirror":
            mirror = True
        elif b.startswith("rot="):
            try:
                rot = float(b[4:])
            except ValueError:
                raise ManifestError(f"line {lineno}: bad rotation '{b}'") from None
        else:
            raise ManifestError(f"line {lineno}: unknown flag component '{b}'")
    return bits[0] == "neg", mirror, rot


def load_manifest(path: str | Path, check_images: bool = True) -> Manifest:
    """Parse a manifest; image paths are relative to the manifest's directory."""
    path = Path(path)
    root = path.parent
    header = None
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if header is None:
            if tok[0] != MAGIC:
                raise ManifestError(f"line {lineno}: expected '{MAGIC}' header")
            kv = dict(t.split("=", 1) for t in tok[1:] if "=" in t)
            if int(kv.get("parts", -1)) != layout.NUM_PARTS:
                raise ManifestError(f"line {lineno}: header declares {kv.get('parts')} parts, "
                                    f"expected {layout.NUM_PARTS}")
            limbs = _parse_limbs(kv["limbs"], lineno) if "limbs" in kv else layout.LIMBS
            header = (kv.get("name", path.stem), kv.get("split", "train"), limbs)
            continue
        neg, mirror, rot = _parse_flag(tok[1] if len(tok) > 1 else "", lineno)
        coords = tok[2:]
        if neg:
            if coords:
                raise ManifestError(f"line {lineno}: negative entry '{tok[0]}' carries coordinates")
            pts = None
        else:
            if len(coords) != 2 * layout.NUM_PARTS:
                raise ManifestError(f"line {lineno}: entry '{tok[0]}' has {len(coords) / 2:g} parts, "
                                    f"expected {layout.NUM_PARTS}")
            try:
                pts = np.array([float(c) for c in coords]).reshape(layout.NUM_PARTS, 2)
            except ValueError:
                raise ManifestError(f"line {lineno}: non-numeric coordinate in '{tok[0]}'") from None
        entry = ManifestEntry(tok[0], pts, mirror, rot)
        if check_images:
            p = Path(entry.path) if Path(entry.path).is_absolute() else root / entry.path
            if not p.is_file():
                raise ManifestError(f"line {lineno}: missing image {p}")
        entries.append(entry)
    if header is None:
        raise ManifestError(f"{path}: no header line")
    return Manifest(header[0], header[1], entries, header[2], root)


# ----------------------------------------------------------------------------------------
# augmentation


def mirror_points(points: np.ndarray, width: float) -> np.ndarray:
    """Flip horizontally and swap left/right labels (observer-centric)."""
    pts = np.asarray(points, dtype=float)
    out = pts[list(layout.MIRROR_PERMUTATION)].copy()
    out[:, 0] = width - out[:, 0]
    return out


def rotate_points(points: np.ndarray, degrees: float, size: tuple[int, int]) -> np.ndarray:
    """Rotate about the image centre; positive angles turn counter-clockwise on screen."""
    h, w = size
    c = np.array([w / 2.0, h / 2.0])
    r = np.deg2rad(degrees)
    # y points down, so a screen-anticlockwise turn is clockwise in (x, y)
    rot = np.array([[np.cos(r), np.sin(r)], [-np.sin(r), np.cos(r)]])
    return (np.asarray(points, dtype=float) - c) @ rot.T + c


def _image_size(manifest: Manifest, e: ManifestEntry) -> tuple[int, int]:
    if e.size is not None:
        return e.size
    with PILImage.open(manifest.resolve(e)) as im:
        return im.height, im.width


def augment(manifest: Manifest, rotations=(), mirror: bool = True, seed: int = 0) -> Manifest:
    """Originals plus mirrored and rotated copies; copies pushing a part off-image are dropped.

    ``seed`` is accepted for interface stability; the transforms are deterministic.
    """
    rots = [float(r) for r in rotations]
    for r in rots:
        if abs(r) > MAX_ROTATION:
            raise ValueError(f"rotation {r} outside +-{MAX_ROTATION} degrees")
    out = []
    dropped = 0
    for e in manifest.entries:
        if e.mirror or e.rotation:
            raise ValueError("augment expects untransformed entries")
        size = _image_size(manifest, e)
        for mir in ((False, True) if mirror else (False,)):
            for rot in [0.0] + rots:
                if not mir and rot == 0.0:
                    out.append(replace(e, size=size))
                    continue
                if e.negative:
                    out.append(replace(e, mirror=mir, rotation=rot, size=size))
                    continue
                pts = transform_points(e.points, mir, rot, size)
                h, w = size
                if (pts < 0).any() or (pts[:, 0] >= w).any() or (pts[:, 1] >= h).any():
                    dropped += 1
                    continue
                out.append(replace(e, points=pts, mirror=mir, rotation=rot, size=size))
    if dropped:
        log.info("augment dropped %d copies with parts off-image", dropped)
    return Manifest(manifest.name, manifest.split, out, manifest.limbs, manifest.root)


def transform_points(points, mirror: bool, rotation: float, size: tuple[int, int]) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if mirror:
        pts = mirror_points(pts, size[1])
    if rotation:
        pts = rotate_points(pts, rotation, size)
    return pts


def transform_image(image: np.ndarray, mirror: bool, rotation: float) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if mirror:
        img = img[:, ::-1].copy()
    if rotation:
        # ndimage rotates counter-clockwise on screen for positive angles, matching rotate_points
        img = ndimage.rotate(img, rotation, axes=(1, 0), reshape=False, order=1, mode="nearest")
    return img


def load_entry_image(manifest: Manifest, entry: ManifestEntry) -> np.ndarray:
    from .features import load_image

    return transform_image(load_image(manifest.resolve(entry)), entry.mirror, entry.rotation)


# ----------------------------------------------------------------------------------------
# PCP


def limb_endpoints(points: np.ndarray, limb) -> np.ndarray:
    _, a, b = limb
    pts = np.asarray(points, dtype=float)
    pa = pts[[layout.PART_INDEX[n] for n in a]].mean(axis=0)
    pb = pts[[layout.PART_INDEX[n] for n in b]].mean(axis=0)
    return np.stack([pa, pb])


def pcp_limb(estimate, truth, alpha: float = PCP_ALPHA, loose: bool = False) -> bool:
    """Strict rule: both endpoint errors within alpha times the true limb length.

    The loose rule averages the two endpoint errors instead.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    est = np.asarray(estimate, dtype=float).reshape(2, 2)
    tru = np.asarray(truth, dtype=float).reshape(2, 2)
    length = float(np.hypot(*(tru[1] - tru[0])))
    e0 = float(np.hypot(*(est[0] - tru[0])))
    e1 = float(np.hypot(*(est[1] - tru[1])))
    if length == 0.0:
        return e0 == 0.0 and e1 == 0.0
    if loose:
        return (e0 + e1) / 2.0 <= alpha * length
    return e0 <= alpha * length and e1 <= alpha * length


@dataclass
class PcpReport:
    correct: dict[str, int]
    counts: dict[str, int]
    images: int
    detected: int
    label: str = ""

    @property
    def detection_rate(self) -> float:
        return self.detected / self.images if self.images else 0.0

    def limb_pcp(self, column: str) -> float:
        n = self.counts.get(column, 0)
        return 100.0 * self.correct.get(column, 0) / n if n else 0.0

    @property
    def total(self) -> float:
        n = sum(self.counts.values())
        if n == 0:
            return 0.0
        return 100.0 * sum(self.correct.values()) / n * self.detection_rate

    def row(self) -> dict[str, float]:
        out = {c: self.limb_pcp(c) for c in self.counts}
        out["Total"] = self.total
        return out

    def to_text(self) -> str:
        cols = list(self.counts) + ["Total"]
        head = f"{'method':<10}" + "".join(f"{c:>8}" for c in cols)
        vals = self.row()
        body = f"{(self.label or 'model'):<10}" + "".join(f"{vals[c]:8.1f}" for c in cols)
        tail = f"images {self.images}, detected {self.detected} ({100 * self.detection_rate:.1f}%)"
        return "\n".join([head, body, tail])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "column", "correct", "count", "pcp", "images", "detected"])
        for c in self.counts:
            w.writerow([self.label, c, self.correct[c], self.counts[c], repr(self.limb_pcp(c)),
                        self.images, self.detected])
        w.writerow([self.label, "Total", sum(self.correct.values()), sum(self.counts.values()),
                    repr(self.total), self.images, self.detected])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PcpReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        correct, counts = {}, {}
        label, images, detected = "", 0, 0
        for r in rows:
            label, images, detected = r["label"], int(r["images"]), int(r["detected"])
            if r["column"] == "Total":
                continue
            correct[r["column"]] = int(r["correct"])
            counts[r["column"]] = int(r["count"])
        return cls(correct, counts, images, detected, label)


def compare_table(base: PcpReport, other: PcpReport) -> str:
    """Both rows plus a delta row (other - base), one value per limb column."""
    cols = list(base.counts) + ["Total"]
    a, b = base.row(), other.row()
    head = f"{'method':<10}" + "".join(f"{c:>8}" for c in cols)
    lines = [head,
             f"{(base.label or 'base'):<10}" + "".join(f"{a[c]:8.1f}" for c in cols),
             f"{(other.label or 'other'):<10}" + "".join(f"{b[c]:8.1f}" for c in cols),
             f"{'delta':<10}" + "".join(f"{b[c] - a[c]:+8.1f}" for c in cols)]
    return "\n".join(lines)


def score_estimates(truths: list[np.ndarray], estimates: list[np.ndarray | None], limbs=layout.LIMBS,
                    alpha: float = PCP_ALPHA, loose: bool = False, label: str = "") -> PcpReport:
    """Tally PCP over images; ``None`` estimates are missed detections.

    Limb columns pool left and right instances, which averages them.
    """
    columns = []
    for name, _, _ in limbs:
        if name not in columns:
            columns.append(name)
    correct = {c: 0 for c in columns}
    counts = {c: 0 for c in columns}
    detected = 0
    for tru, est in zip(truths, estimates):
        if est is None:
            continue
        detected += 1
        for limb in limbs:
            counts[limb[0]] += 1
            if pcp_limb(limb_endpoints(est, limb), limb_endpoints(tru, limb), alpha, loose):
                correct[limb[0]] += 1
    return PcpReport(correct, counts, len(truths), detected, label)


def predict_points(model, image: np.ndarray, occlusion: bool = False, threshold: float | None = None):
    """Part centres of the best detection, or None."""
    from .inference import detect

    ests = detect(model, image, occlusion=occlusion, threshold=threshold, max_detections=1)
    return ests[0].points() if ests else None


def evaluate(model, manifest: Manifest, occlusion: bool = False, alpha: float = PCP_ALPHA,
             loose: bool = False, jobs: int = 1, threshold: float | None = None,
             label: str = "") -> PcpReport:
    """Best detection per positive image scored against its annotation."""
    entries = manifest.positives

    def one(e):
        return predict_points(model, load_entry_image(manifest, e), occlusion, threshold)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            ests = list(ex.map(one, entries))
    else:
        ests = [one(e) for e in entries]
    return score_estimates([e.points for e in entries], ests, manifest.limbs, alpha, loose,
                           label or ("OA-MST" if occlusion else "MST"))
