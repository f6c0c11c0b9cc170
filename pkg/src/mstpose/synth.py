"""Synthetic articulated stick figures with controllable inter-limb occlusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import layout
from .geometry import Box, iou

log = logging.getLogger(__name__)

OCCLUSION_MODES = ("none", "legs_crossed", "arm_over_torso", "mixed")
BACKGROUNDS = ("noise", "gradient", "flat")
FORCED_IOU = (0.1, 0.6)
MAX_TRIES = 100


@dataclass(frozen=True)
class FigureSpec:
    """Segment lengths in pixels and joint-angle ranges in degrees.

    Angles are measured from the downward vertical; positive values swing
    toward +x.  Ranges are given for the image-left limb and mirrored for the
    right one.
    """

    torso: float = 36.0
    neck_to_head: float = 12.0
    shoulder_half_width: float = 11.0
    hip_half_width: float = 7.0
    upper_arm: float = 18.0
    lower_arm: float = 16.0
    hand: float = 5.0
    upper_leg: float = 24.0
    lower_leg: float = 22.0
    foot: float = 6.0
    torso_tilt: tuple[float, float] = (-8.0, 8.0)
    head_tilt: tuple[float, float] = (-15.0, 15.0)
    upper_arm_angle: tuple[float, float] = (-150.0, -15.0)
    elbow_bend: tuple[float, float] = (-80.0, 80.0)
    upper_leg_angle: tuple[float, float] = (-30.0, -5.0)
    knee_bend: tuple[float, float] = (-25.0, 25.0)
    crossed_leg_angle: tuple[float, float] = (2.0, 30.0)
    thickness: float = 1.0  # multiplies every capsule radius
    texture_seed: int = 0

    def __post_init__(self):
        lengths = (self.torso, self.neck_to_head, self.upper_arm, self.lower_arm, self.hand,
                   self.upper_leg, self.lower_leg, self.foot, self.thickness)
        if min(lengths) <= 0:
            raise ValueError("segment lengths and thickness must be positive")
        for lo, hi in (self.torso_tilt, self.head_tilt, self.upper_arm_angle, self.elbow_bend,
                       self.upper_leg_angle, self.knee_bend, self.crossed_leg_angle):
            if not -180.0 <= lo <= hi <= 180.0:
                raise ValueError(f"bad angle range ({lo}, {hi})")


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    background: str = "noise"
    occlusion_mode: str = "none"
    occlusion_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")
        if self.occlusion_mode not in OCCLUSION_MODES:
            raise ValueError(f"occlusion_mode must be one of {OCCLUSION_MODES}")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must lie in [0, 1]")
        if self.width < 16 or self.height < 16:
            raise ValueError("canvas too small")


@dataclass
class SynthPose:
    points: np.ndarray  # (26, 2) x, y
    occlusions: list[tuple[str, str, float]] = field(default_factory=list)  # (occluder, occluded, IoU)
    draw_order: tuple[str, ...] = ()
    shades: dict[str, float] = field(default_factory=dict)
    texture_seed: int = 0


def _dir(deg: float) -> np.ndarray:
    r = np.deg2rad(deg)
    return np.array([np.sin(r), np.cos(r)])


def part_box(points: np.ndarray, name: str, size: float = layout.PART_BOX_SIZE) -> Box:
    x, y = points[layout.PART_INDEX[name]]
    return Box.around(x, y, size, size)


def group_box(points: np.ndarray, names, size: float = layout.PART_BOX_SIZE) -> Box:
    """Bounding box of the named parts' boxes."""
    xy = points[[layout.PART_INDEX[n] for n in names]]
    h = size / 2
    return Box(xy[:, 0].min() - h, xy[:, 1].min() - h, xy[:, 0].max() + h, xy[:, 1].max() + h)


TORSO_PARTS = ("neck", "shoulder_l", "shoulder_r", "hip_l", "hip_r")


def _group(name: str) -> tuple[str, ...]:
    if name == "torso":
        return TORSO_PARTS
    return layout.SUBTREES[layout.SUBTREE_INDEX[name]].part_names


def limb_iou(points: np.ndarray, a: str, b: str) -> float:
    return iou(group_box(points, _group(a)), group_box(points, _group(b)))


def _skeleton(fig: FigureSpec, neck: np.ndarray, ang: dict[str, float]) -> np.ndarray:
    pts = np.zeros((layout.NUM_PARTS, 2))

    def put(name, xy):
        pts[layout.PART_INDEX[name]] = xy

    down = _dir(ang["tilt"])
    across = np.array([down[1], -down[0]])  # +x for an upright figure
    mid_hip = neck + fig.torso * down
    put("neck", neck)
    put("head", neck - fig.neck_to_head * _dir(ang["tilt"] + ang["head"]))
    for s, sign in (("l", -1.0), ("r", 1.0)):
        sh = neck + 3.0 * down + sign * fig.shoulder_half_width * across
        hip = mid_hip + sign * fig.hip_half_width * across
        a1 = ang[f"arm1_{s}"]
        elbow = sh + fig.upper_arm * _dir(a1)
        a2 = a1 + ang[f"arm2_{s}"]
        wrist = elbow + fig.lower_arm * _dir(a2)
        l1 = ang[f"leg1_{s}"]
        knee = hip + fig.upper_leg * _dir(l1)
        l2 = l1 + ang[f"leg2_{s}"]
        ankle = knee + fig.lower_leg * _dir(l2)
        put(f"shoulder_{s}", sh)
        put(f"uarm_{s}", (sh + elbow) / 2)
        put(f"elbow_{s}", elbow)
        put(f"larm_{s}", (elbow + wrist) / 2)
        put(f"wrist_{s}", wrist)
        put(f"hand_{s}", wrist + fig.hand * _dir(a2))
        put(f"hip_{s}", hip)
        put(f"uleg_{s}", (hip + knee) / 2)
        put(f"knee_{s}", knee)
        put(f"lleg_{s}", (knee + ankle) / 2)
        put(f"ankle_{s}", ankle)
        put(f"foot_{s}", ankle + fig.foot * np.array([sign, 0.0]))
    return pts


def _sample_angles(fig: FigureSpec, rng: np.random.Generator, crossed: str | None = None,
                   arm_over: str | None = None) -> dict[str, float]:
    u = rng.uniform
    ang = {"tilt": u(*fig.torso_tilt), "head": u(*fig.head_tilt)}
    for s, sign in (("l", 1.0), ("r", -1.0)):
        # ranges are written for the left limb; the right limb mirrors them
        ang[f"arm1_{s}"] = sign * u(*fig.upper_arm_angle)
        ang[f"arm2_{s}"] = u(*fig.elbow_bend)
        ang[f"leg1_{s}"] = sign * u(*fig.upper_leg_angle)
        ang[f"leg2_{s}"] = sign * u(*fig.knee_bend)
    if crossed is not None:
        s = "l" if crossed == "left_leg" else "r"
        sign = 1.0 if s == "l" else -1.0
        ang[f"leg1_{s}"] = sign * u(*fig.crossed_leg_angle)
        ang[f"leg2_{s}"] = sign * u(0.0, 15.0)
    if arm_over is not None:
        s = "l" if arm_over == "left_arm" else "r"
        sign = 1.0 if s == "l" else -1.0
        ang[f"arm1_{s}"] = sign * u(5.0, 50.0)
        ang[f"arm2_{s}"] = sign * u(20.0, 90.0)
    return ang


def _on_canvas(points: np.ndarray, scene: SceneSpec, margin: float = 4.0) -> bool:
    return bool((points[:, 0] >= margin).all() and (points[:, 0] <= scene.width - margin).all()
                and (points[:, 1] >= margin).all() and (points[:, 1] <= scene.height - margin).all())


def _sibling_clear(points: np.ndarray) -> bool:
    """No part box of one limb touches a part box of its sibling limb."""
    for a, b in (("left_arm", "right_arm"), ("left_leg", "right_leg")):
        for pa in _group(a):
            for pb in _group(b):
                if iou(part_box(points, pa), part_box(points, pb)) > 0:
                    return False
    return True


def _place(fig: FigureSpec, scene: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    span = fig.neck_to_head + fig.torso + fig.upper_leg + fig.lower_leg
    top = fig.neck_to_head + 6.0
    cy_hi = max(top, scene.height - span + fig.neck_to_head - 6.0)
    return np.array([rng.uniform(scene.width * 0.4, scene.width * 0.6), rng.uniform(top, cy_hi)])


def sample_pose(fig: FigureSpec, scene: SceneSpec, rng: np.random.Generator) -> SynthPose:
    """One pose; with probability ``occlusion_rate`` a designated limb pair is forced to overlap."""
    mode = scene.occlusion_mode
    forced = mode != "none" and rng.random() < scene.occlusion_rate
    if forced and mode == "mixed":
        mode = "legs_crossed" if rng.random() < 0.5 else "arm_over_torso"
    shades = {name: float(rng.uniform(0.55, 0.95)) for name in ("torso", "head") + tuple(
        st.name for st in layout.SUBTREES)}
    tex = int(rng.integers(2 ** 31))
    base_order = ("torso", "head", "left_leg", "right_leg", "left_arm", "right_arm")
    if forced:
        for _ in range(MAX_TRIES):
            if mode == "legs_crossed":
                front = "left_leg" if rng.random() < 0.5 else "right_leg"
                back = "right_leg" if front == "left_leg" else "left_leg"
                pts = _skeleton(fig, _place(fig, scene, rng), _sample_angles(fig, rng, crossed=front))
            else:
                front = "left_arm" if rng.random() < 0.5 else "right_arm"
                back = "torso"
                pts = _skeleton(fig, _place(fig, scene, rng), _sample_angles(fig, rng, arm_over=front))
            v = limb_iou(pts, front, back)
            if FORCED_IOU[0] <= v <= FORCED_IOU[1] and _on_canvas(pts, scene):
                # occluded limb first, occluder last among its kind
                if back == "torso":
                    order = tuple(n for n in base_order if n != front) + (front,)
                else:
                    legs = (back, front)
                    order = ("torso", "head") + legs + ("left_arm", "right_arm")
                return SynthPose(pts, [(front, back, float(v))], tuple(order), shades, tex)
        log.warning("occlusion constraint unsatisfiable after %d samples; using a clear pose", MAX_TRIES)
    for _ in range(10 * MAX_TRIES):
        pts = _skeleton(fig, _place(fig, scene, rng), _sample_angles(fig, rng))
        if _on_canvas(pts, scene) and _sibling_clear(pts):
            return SynthPose(pts, [], base_order, shades, tex)
    raise RuntimeError("could not place a figure on the canvas; enlarge it")


# ----------------------------------------------------------------------------------------
# rendering


def value_noise(shape: tuple[int, int], rng: np.random.Generator, period: int = 8) -> np.ndarray:
    """Smooth noise in roughly [-1, 1] from a cubic-upsampled random lattice."""
    h, w = shape
    grid = rng.uniform(-1.0, 1.0, (h // period + 3, w // period + 3))
    up = ndimage.zoom(grid, period, order=3, mode="nearest")
    return np.clip(up[:h, :w], -1.0, 1.0)


def capsule_coverage(shape: tuple[int, int], p0, p1, radius: float) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of a capsule; zero beyond radius + 0.5."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx + 0.5, yy + 0.5
    p0 = np.asarray(p0, dtype=float)
    d = np.asarray(p1, dtype=float) - p0
    L2 = float(d @ d)
    if L2 == 0:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - p0[0]) * d[0] + (py - p0[1]) * d[1]) / L2, 0.0, 1.0)
    dist = np.hypot(px - (p0[0] + t * d[0]), py - (p0[1] + t * d[1]))
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _segments(points: np.ndarray, thickness: float) -> dict[str, list[tuple[np.ndarray, np.ndarray, float]]]:
    P = {n: points[layout.PART_INDEX[n]] for n in layout.PART_NAMES}
    mid_hip = (P["hip_l"] + P["hip_r"]) / 2
    mid_sh = (P["shoulder_l"] + P["shoulder_r"]) / 2
    t = thickness
    segs = {
        "torso": [(mid_sh, mid_hip, 9.0 * t), (P["shoulder_l"], P["shoulder_r"], 3.5 * t)],
        "head": [(P["head"], P["head"], 7.0 * t), (P["head"], P["neck"], 3.0 * t)],
    }
    for s, side in (("l", "left"), ("r", "right")):
        segs[f"{side}_arm"] = [(P[f"shoulder_{s}"], P[f"elbow_{s}"], 3.5 * t),
                               (P[f"elbow_{s}"], P[f"wrist_{s}"], 3.0 * t),
                               (P[f"wrist_{s}"], P[f"hand_{s}"], 2.5 * t)]
        segs[f"{side}_leg"] = [(P[f"hip_{s}"], P[f"knee_{s}"], 4.5 * t),
                               (P[f"knee_{s}"], P[f"ankle_{s}"], 3.5 * t),
                               (P[f"ankle_{s}"], P[f"foot_{s}"], 2.5 * t)]
    return segs


def render_background(scene: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    shape = (scene.height, scene.width)
    if scene.background == "flat":
        return np.zeros(shape)
    if scene.background == "gradient":
        a, b = rng.uniform(0.05, 0.4, 2)
        ang = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:scene.height, 0:scene.width]
        t = (np.cos(ang) * xx / scene.width + np.sin(ang) * yy / scene.height + 1.0) / 2.0
        return a + (b - a) * t
    base = rng.uniform(0.15, 0.35)
    return np.clip(base + 0.12 * value_noise(shape, rng, 16) + 0.05 * value_noise(shape, rng, 4), 0, 1)


def render(pose: SynthPose, scene: SceneSpec, fig: FigureSpec | None = None,
           background: np.ndarray | None = None) -> np.ndarray:
    """Grayscale image in [0, 1]; limbs later in ``draw_order`` cover earlier ones."""
    fig = fig or FigureSpec()
    shape = (scene.height, scene.width)
    rng = np.random.default_rng([fig.texture_seed, pose.texture_seed])
    img = render_background(scene, rng) if background is None else np.array(background, dtype=float)
    segs = _segments(pose.points, fig.thickness)
    for name in pose.draw_order:
        cov = np.zeros(shape)
        for p0, p1, r in segs[name]:
            cov = np.maximum(cov, capsule_coverage(shape, p0, p1, r))
        shade = pose.shades.get(name, 0.8)
        tone = np.clip(shade + 0.12 * value_noise(shape, rng, 6), 0.0, 1.0)
        img = img * (1.0 - cov) + tone * cov
    return img


def render_negative(scene: SceneSpec, rng: np.random.Generator, clutter: int = 6) -> np.ndarray:
    """Background with scattered capsules that do not form a figure."""
    shape = (scene.height, scene.width)
    img = render_background(scene, rng)
    for _ in range(int(rng.integers(0, clutter + 1))):
        p0 = rng.uniform(0, [scene.width, scene.height])
        p1 = p0 + rng.uniform(-25, 25, 2)
        cov = capsule_coverage(shape, p0, p1, rng.uniform(2.0, 6.0))
        tone = np.clip(rng.uniform(0.5, 0.95) + 0.12 * value_noise(shape, rng, 6), 0, 1)
        img = img * (1.0 - cov) + tone * cov
    return img


# ----------------------------------------------------------------------------------------
# datasets


@dataclass
class SynthSample:
    image: np.ndarray
    pose: SynthPose | None  # None for negatives


def sample_stream(index: int, scene: SceneSpec) -> np.random.Generator:
    return np.random.default_rng([scene.seed, index])


def generate(n_pos: int, scene: SceneSpec, fig: FigureSpec | None = None, n_neg: int = 0,
             start: int = 0):
    """Yield ``n_pos`` positive then ``n_neg`` negative samples; each uses its own rng stream."""
    fig = fig or FigureSpec()
    for i in range(n_pos):
        rng = sample_stream(start + i, scene)
        pose = sample_pose(fig, scene, rng)
        yield SynthSample(render(pose, scene, fig), pose)
    for i in range(n_neg):
        rng = sample_stream(start + n_pos + i, scene)
        yield SynthSample(render_negative(scene, rng), None)


def write_dataset(out_dir: str | Path, n_pos: int, scene: SceneSpec, fig: FigureSpec | None = None,
                  n_neg: int = 0, name: str = "synth", split: str = "train", start: int = 0) -> Path:
    """Write PNG images plus a manifest (and a sidecar listing occlusion pairs)."""
    from .evaluation import Manifest, ManifestEntry, write_manifest
    from .features import save_image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    occl_lines = ["# image occluder occluded iou"]
    for i, s in enumerate(generate(n_pos, scene, fig, n_neg, start)):
        rel = f"images/{split}_{i:05d}.png"
        save_image(out / rel, s.image)
        if s.pose is None:
            entries.append(ManifestEntry(rel, None))
        else:
            entries.append(ManifestEntry(rel, s.pose.points.copy()))
            for a, b, v in s.pose.occlusions:
                occl_lines.append(f"{rel} {a} {b} {v:.6f}")
    path = out / f"{split}.manifest"
    comments = [f"synth seed={scene.seed} mode={scene.occlusion_mode} rate={scene.occlusion_rate} "
                f"canvas={scene.width}x{scene.height} background={scene.background}"]
    write_manifest(path, Manifest(name, split, entries, root=out), comments)
    (out / f"{split}.occlusions").write_text("\n".join(occl_lines) + "\n")
    return path
