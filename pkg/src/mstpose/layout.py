"""The 26-part body layout shared by the model, the synthetic generator and the evaluator.

Labels are observer-centric: ``_l`` parts are on the image's left side in an
upright, frontal figure.
"""

from __future__ import annotations

from dataclasses import dataclass

SIDE_PARTS = (
    "shoulder", "uarm", "elbow", "larm", "wrist", "hand",
    "hip", "uleg", "knee", "lleg", "ankle", "foot",
)

PART_NAMES: tuple[str, ...] = ("head", "neck") + tuple(
    f"{p}_{s}" for s in ("l", "r") for p in SIDE_PARTS
)
NUM_PARTS = len(PART_NAMES)
PART_INDEX = {name: i for i, name in enumerate(PART_NAMES)}


def mirror_name(name: str) -> str:
    if name.endswith("_l"):
        return name[:-2] + "_r"
    if name.endswith("_r"):
        return name[:-2] + "_l"
    return name


MIRROR_PERMUTATION = tuple(PART_INDEX[mirror_name(n)] for n in PART_NAMES)


@dataclass(frozen=True)
class SubTreeDefinition:
    name: str
    part_ids: tuple[int, ...]
    parent: str  # upper-layer latent node the sub-tree root hangs from

    @property
    def part_names(self) -> tuple[str, ...]:
        return tuple(PART_NAMES[i] for i in self.part_ids)


def _ids(*names: str) -> tuple[int, ...]:
    return tuple(PART_INDEX[n] for n in names)


SUBTREES: tuple[SubTreeDefinition, ...] = (
    SubTreeDefinition("left_arm", _ids("uarm_l", "elbow_l", "larm_l", "wrist_l", "hand_l"), "U.Body"),
    SubTreeDefinition("right_arm", _ids("uarm_r", "elbow_r", "larm_r", "wrist_r", "hand_r"), "U.Body"),
    SubTreeDefinition("left_leg", _ids("uleg_l", "knee_l", "lleg_l", "ankle_l", "foot_l"), "L.Body"),
    SubTreeDefinition("right_leg", _ids("uleg_r", "knee_r", "lleg_r", "ankle_r", "foot_r"), "L.Body"),
)
SUBTREE_INDEX = {st.name: i for i, st in enumerate(SUBTREES)}

# Upper layer: node -> parent.  Latent nodes are Root, U.Body and L.Body; the
# four sub-tree roots attach below U.Body / L.Body.  Order is a valid
# top-down ordering.
UPPER_LATENT = ("Root", "U.Body", "L.Body")
UPPER_PARENT: dict[str, str | None] = {
    "Root": None,
    "U.Body": "Root",
    "L.Body": "Root",
    "neck": "Root",
    "head": "neck",
    "shoulder_l": "U.Body",
    "shoulder_r": "U.Body",
    "hip_l": "L.Body",
    "hip_r": "L.Body",
}
UPPER_OBSERVED = tuple(n for n in UPPER_PARENT if n not in UPPER_LATENT)

# Parts whose mean gives each upper latent node's location.
LATENT_MEMBERS = {
    "Root": ("neck", "shoulder_l", "shoulder_r", "hip_l", "hip_r"),
    "U.Body": ("shoulder_l", "shoulder_r"),
    "L.Body": ("hip_l", "hip_r"),
}

# Drawing / PCP segments.  An endpoint may average several parts.
LIMBS: tuple[tuple[str, tuple[str, ...], tuple[str, ...]], ...] = (
    ("Torso", ("neck",), ("hip_l", "hip_r")),
    ("Head", ("head",), ("neck",)),
    ("U.Leg", ("hip_l",), ("knee_l",)),
    ("U.Leg", ("hip_r",), ("knee_r",)),
    ("L.Leg", ("knee_l",), ("ankle_l",)),
    ("L.Leg", ("knee_r",), ("ankle_r",)),
    ("U.Arm", ("shoulder_l",), ("elbow_l",)),
    ("U.Arm", ("shoulder_r",), ("elbow_r",)),
    ("L.Arm", ("elbow_l",), ("wrist_l",)),
    ("L.Arm", ("elbow_r",), ("wrist_r",)),
)
LIMB_COLUMNS = ("Torso", "Head", "U.Leg", "L.Leg", "U.Arm", "L.Arm")

SKELETON = (
    ("head", "neck"), ("neck", "shoulder_l"), ("neck", "shoulder_r"),
    ("shoulder_l", "hip_l"), ("shoulder_r", "hip_r"), ("hip_l", "hip_r"),
) + tuple(
    (f"{a}_{s}", f"{b}_{s}")
    for s in ("l", "r")
    for a, b in (
        ("shoulder", "uarm"), ("uarm", "elbow"), ("elbow", "larm"), ("larm", "wrist"),
        ("wrist", "hand"), ("hip", "uleg"), ("uleg", "knee"), ("knee", "lleg"),
        ("lleg", "ankle"), ("ankle", "foot"),
    )
)

# Canonical part box side in pixels at scale 1 (matches 3x3 templates of 4 px cells).
PART_BOX_SIZE = 12.0
CANONICAL_TORSO = 64.0


def torso_height(points) -> float:
    """Neck to hip-midpoint distance for a (26, 2) array of (x, y) points."""
    import numpy as np

    pts = np.asarray(points, dtype=float)
    mid_hip = (pts[PART_INDEX["hip_l"]] + pts[PART_INDEX["hip_r"]]) / 2
    return float(np.hypot(*(pts[PART_INDEX["neck"]] - mid_hip)))
