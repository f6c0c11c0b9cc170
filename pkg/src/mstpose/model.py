"""Two-layer pose model: sub-tree mixtures below, torso/head and latent body nodes above."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import layout
from .features import FEATURE_DIM
from .structure import ROOT, MixtureStructure, cluster_mixtures, root_location

log = logging.getLogger(__name__)

DEFAULT_DEFORMATION = (0.1, 0.0, 0.1, 0.0)
# displacements enter the deformation cost in units of this many feature cells, which
# keeps deformation features on a scale comparable to the appearance features
DISPLACEMENT_UNIT = 4.0
_UNIT_SCALE = np.array([DISPLACEMENT_UNIT ** -2, 1 / DISPLACEMENT_UNIT, DISPLACEMENT_UNIT ** -2, 1 / DISPLACEMENT_UNIT])


def dt_coefficients(deformation) -> np.ndarray:
    """Weights of (dx^2, dx, dy^2, dy) per cell, for weights stored per displacement unit."""
    return np.asarray(deformation, dtype=float) * _UNIT_SCALE


def deformation_features(dy: float, dx: float) -> np.ndarray:
    """Feature vector whose dot product with the stored weights is minus the deformation cost."""
    return -np.array([dx * dx, dx, dy * dy, dy], dtype=float) * _UNIT_SCALE
NEG_INF = -np.inf


@dataclass
class PartSpec:
    """Parameters of one node; latent nodes have a single type and no template."""

    name: str
    parent: str | None
    templates: np.ndarray  # (K, h, w, D)
    biases: np.ndarray  # (K,)
    anchors: np.ndarray  # (K, 2) integer (dy, dx) offset from the parent, in cells
    deformation: np.ndarray  # (K, 4) weights of (dx^2, dx, dy^2, dy), displacement in DISPLACEMENT_UNIT cells
    compat: np.ndarray  # (K, K_parent); -inf marks incompatible type pairs
    extent: tuple[int, int] = (3, 3)  # box size in cells
    latent: bool = False

    @property
    def num_types(self) -> int:
        return self.templates.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.templates.shape[1], self.templates.shape[2]


@dataclass
class MixtureModel:
    structure: MixtureStructure
    nodes: dict[str, PartSpec]
    bias: np.ndarray = field(default_factory=lambda: np.zeros(1))
    root_deformation: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_DEFORMATION))
    gate: bool = True


@dataclass
class SubTreeModel:
    name: str
    parent: str
    mixtures: list[MixtureModel]
    anchor: np.ndarray  # (2,) (dy, dx) of the sub-tree root relative to its upper parent
    extent: tuple[int, int]
    z_norm: int  # mixtures of this sub-tree plus its sibling under the same parent

    @property
    def M(self) -> int:
        return len(self.mixtures)

    def effective_deformation(self) -> np.ndarray:
        """Root-to-parent weights: mixture weights summed and divided by Z."""
        return sum(m.root_deformation for m in self.mixtures) / self.z_norm


@dataclass
class OcclusionParams:
    """Per sub-tree pair: exclusion weight lambda and the overlap range [lower, upper]."""

    pairs: dict[tuple[str, str], tuple[float, float, float]] = field(default_factory=dict)

    @staticmethod
    def key(a: str, b: str) -> tuple[str, str]:
        return (a, b) if a <= b else (b, a)

    def get(self, a: str, b: str) -> tuple[float, float, float]:
        return self.pairs.get(self.key(a, b), (0.0, 0.0, 1.0))

    def set(self, a: str, b: str, lam: float, lower: float, upper: float) -> None:
        self.pairs[self.key(a, b)] = (float(lam), float(lower), float(upper))


@dataclass
class PoseModel:
    upper: dict[str, PartSpec]
    subtrees: dict[str, SubTreeModel]
    occlusion: OcclusionParams = field(default_factory=OcclusionParams)
    meta: dict = field(default_factory=dict)

    @property
    def cell_size(self) -> int:
        return int(self.meta.get("cell_size", 4))

    def copy(self) -> "PoseModel":
        return copy.deepcopy(self)

    def upper_postorder(self) -> list[str]:
        """Upper-layer nodes and sub-tree roots, children before parents."""
        kids: dict[str, list[str]] = {}
        for n, spec in self.upper.items():
            if spec.parent is not None:
                kids.setdefault(spec.parent, []).append(n)
        for st in self.subtrees.values():
            kids.setdefault(st.parent, []).append(st.name)
        out: list[str] = []
        seen = set()

        def visit(n):
            if n in seen:
                return
            seen.add(n)
            for c in kids.get(n, []):
                visit(c)
            out.append(n)

        visit("Root")
        return out

    def upper_parent(self, node: str) -> str | None:
        if node in self.subtrees:
            return self.subtrees[node].parent
        return self.upper[node].parent


def latent_spec(name: str, parent: str | None, parent_types: int = 1, anchor=(0, 0),
                extent=(3, 3), dim: int = FEATURE_DIM) -> PartSpec:
    return PartSpec(
        name, parent,
        templates=np.zeros((1, 0, 0, dim)),
        biases=np.zeros(1),
        anchors=np.array([anchor], dtype=int),
        deformation=np.array([DEFAULT_DEFORMATION]),
        compat=np.zeros((1, parent_types)),
        extent=tuple(int(v) for v in extent),
        latent=True,
    )


# ----------------------------------------------------------------------------------------
# validation


def _check_spec(path: str, spec: PartSpec, dim: int, parent_types: int | None) -> list[str]:
    out = []
    K = spec.num_types
    if K < 1:
        out.append(f"{path}: needs at least one type")
        return out
    if spec.latent and spec.templates.size != 0:
        out.append(f"{path}: latent node carries a non-empty template")
    if not spec.latent:
        if spec.templates.ndim != 4 or spec.templates.shape[3] != dim:
            out.append(f"{path}: template dim {spec.templates.shape} does not match feature dim {dim}")
        if not np.all(np.isfinite(spec.templates)):
            out.append(f"{path}: non-finite template weights")
    if spec.biases.shape != (K,) or not np.all(np.isfinite(spec.biases)):
        out.append(f"{path}: biases malformed")
    if spec.parent is not None:
        if spec.anchors.shape != (K, 2):
            out.append(f"{path}: anchors shape {spec.anchors.shape}")
        if spec.deformation.shape != (K, 4) or not np.all(np.isfinite(spec.deformation)):
            out.append(f"{path}: deformation malformed")
        else:
            for k in range(K):
                if spec.deformation[k, 0] < 0 or spec.deformation[k, 2] < 0:
                    out.append(f"{path}: type {k} has negative quadratic deformation "
                               f"{spec.deformation[k].tolist()}")
        if parent_types is not None and spec.compat.shape != (K, parent_types):
            out.append(f"{path}: compat shape {spec.compat.shape} != ({K}, {parent_types})")
        elif not np.isfinite(spec.compat).any():
            out.append(f"{path}: no compatible type pair on edge to {spec.parent}")
        if np.isnan(spec.compat).any() or np.isposinf(spec.compat).any():
            out.append(f"{path}: compatibility contains NaN or +inf")
    return out


def validate(model: PoseModel) -> list[str]:
    """Every invariant violation as a path-prefixed message; empty means valid."""
    dim = int(model.meta.get("feature_dim", FEATURE_DIM))
    problems: list[str] = []

    # upper layer must be a tree rooted at Root
    nodes = list(model.upper) + list(model.subtrees)
    parents = {n: model.upper_parent(n) for n in nodes}
    roots = [n for n, p in parents.items() if p is None]
    if roots != ["Root"]:
        problems.append(f"upper: expected single root 'Root', found {roots}")
    uf = {n: n for n in nodes}

    def find(a):
        while uf[a] != a:
            uf[a] = uf[uf[a]]
            a = uf[a]
        return a

    for n, p in parents.items():
        if p is None:
            continue
        if p not in uf:
            problems.append(f"upper/{n}: unknown parent {p}")
            continue
        ra, rb = find(n), find(p)
        if ra == rb:
            problems.append(f"upper/{n}: not a tree (edge to {p} closes a cycle)")
        else:
            uf[ra] = rb

    for n, spec in model.upper.items():
        ptypes = None
        if spec.parent in model.upper:
            ptypes = model.upper[spec.parent].num_types
        problems += _check_spec(f"upper/{n}", spec, dim, ptypes)
        if n in layout.UPPER_LATENT and not spec.latent:
            problems.append(f"upper/{n}: must be latent")

    for name, st in model.subtrees.items():
        if st.M < 1:
            problems.append(f"{name}: no mixtures")
        if st.parent not in model.upper:
            problems.append(f"{name}: parent {st.parent} not in upper layer")
        for m, mix in enumerate(st.mixtures):
            path = f"{name}/m{m}"
            problems += [f"{path}: {p}" for p in mix.structure.check()]
            if set(mix.nodes) != set(mix.structure.parent):
                problems.append(f"{path}: node parameters do not match structure")
                continue
            if not mix.nodes[ROOT].latent:
                problems.append(f"{path}: root v0 must be latent")
            for node, spec in mix.nodes.items():
                ptypes = mix.nodes[spec.parent].num_types if spec.parent in mix.nodes else None
                problems += _check_spec(f"{path}/{node}", spec, dim, ptypes)
                if (node in mix.structure.observed) == spec.latent:
                    problems.append(f"{path}/{node}: latent flag disagrees with structure")
            rd = mix.root_deformation
            if rd.shape != (4,) or rd[0] < 0 or rd[2] < 0:
                problems.append(f"{path}: root deformation has negative quadratic coefficient")
            if not np.isfinite(mix.bias).all():
                problems.append(f"{path}: non-finite mixture bias")
        if not any(mix.gate for mix in st.mixtures):
            problems.append(f"{name}: every mixture is gated off")

    for (a, b), (lam, lo, hi) in model.occlusion.pairs.items():
        if a > b:
            problems.append(f"occlusion/{a}-{b}: key not canonical")
        if not 0.0 <= lam < 1.0:
            problems.append(f"occlusion/{a}-{b}: lambda {lam} outside [0, 1)")
        if not 0.0 <= lo <= hi <= 1.0:
            problems.append(f"occlusion/{a}-{b}: bounds [{lo}, {hi}] invalid")
    return problems


# ----------------------------------------------------------------------------------------
# initialisation


def _odd(v: float) -> int:
    n = max(1, int(round(v)))
    return n if n % 2 else n + 1


def _type_clusters(offsets: np.ndarray, K: int, seed: int) -> np.ndarray:
    if len(offsets) == 0:
        return np.zeros(0, dtype=int)
    k = min(K, len(np.unique(offsets, axis=0)))
    if k <= 1:
        return np.zeros(len(offsets), dtype=int)
    return cluster_mixtures(offsets, k, seed)


def _anchors_and_compat(child_off: np.ndarray, child_types: np.ndarray, parent_types: np.ndarray,
                        K: int, Kp: int) -> tuple[np.ndarray, np.ndarray]:
    overall = child_off.mean(axis=0) if len(child_off) else np.zeros(2)
    anchors = np.zeros((K, 2), dtype=int)
    compat = np.full((K, Kp), NEG_INF)
    for k in range(K):
        sel = child_types == k
        mean = child_off[sel].mean(axis=0) if sel.any() else overall
        anchors[k] = np.round(mean).astype(int)
        if sel.any():
            for kp in np.unique(parent_types[sel]):
                compat[k, int(kp)] = 0.0
        else:
            compat[k, :] = 0.0
    return anchors, compat


def _node_cells(points: np.ndarray, names, cell: float) -> np.ndarray:
    """(n, 2) mean (y, x) cell location of the named parts per sample."""
    idx = [layout.PART_INDEX[n] for n in names]
    xy = points[:, idx].mean(axis=1)
    return xy[:, ::-1] / cell


def init_parameters(structures: dict[str, list[MixtureStructure]], assignments: dict[str, np.ndarray],
                    points, K_limb: int = 6, K_other: int = 4, seed: int = 0,
                    cell_size: int = 4, meta: dict | None = None) -> PoseModel:
    """Zero templates and biases, default deformation, anchors from training offsets.

    Part types are K-means clusters of the child-to-parent offset within each
    mixture; type pairs never seen together are marked incompatible.
    """
    pts = np.asarray(points, dtype=float)
    cell = float(cell_size)
    tpl = _odd(layout.PART_BOX_SIZE / cell)
    dim = FEATURE_DIM
    rng_seed = int(seed)

    def locs(names):
        return _node_cells(pts, names, cell)

    # upper layer
    upper_nodes = {n: layout.LATENT_MEMBERS.get(n, (n,)) for n in layout.UPPER_PARENT}
    upper_types: dict[str, np.ndarray] = {}
    upper: dict[str, PartSpec] = {}
    for n, parent in layout.UPPER_PARENT.items():  # top-down order
        latent = n in layout.UPPER_LATENT
        K = 1 if latent else K_other
        if parent is None:
            upper_types[n] = np.zeros(len(pts), dtype=int)
            upper[n] = latent_spec(n, None, extent=_extent(pts, layout.PART_NAMES, cell, tpl))
            continue
        off = locs(upper_nodes[n]) - locs(upper_nodes[parent])
        types = np.zeros(len(pts), dtype=int) if latent else _type_clusters(off, K, rng_seed)
        upper_types[n] = types
        Kp = upper[parent].num_types
        anchors, compat = _anchors_and_compat(off, types, upper_types[parent], K, Kp)
        if latent:
            members = _latent_extent_members(n)
            spec = latent_spec(n, parent, Kp, anchors[0], _extent(pts, members, cell, tpl))
            spec.compat = compat
        else:
            spec = PartSpec(n, parent, np.zeros((K, tpl, tpl, dim)), np.zeros(K), anchors,
                            np.tile(DEFAULT_DEFORMATION, (K, 1)), compat, (tpl, tpl))
        upper[n] = spec

    subtrees: dict[str, SubTreeModel] = {}
    parent_mix_count: dict[str, int] = {}
    for st in layout.SUBTREES:
        parent_mix_count[st.parent] = parent_mix_count.get(st.parent, 0) + len(structures[st.name])
    for st in layout.SUBTREES:
        assign = np.asarray(assignments[st.name])
        roots = np.array([root_location(p, st) for p in pts])[:, ::-1] / cell
        parent_loc = locs(layout.LATENT_MEMBERS[st.parent])
        anchor = np.round((roots - parent_loc).mean(axis=0)).astype(int)
        mixtures = []
        for m, struct in enumerate(structures[st.name]):
            sel = assign == m
            sub = pts[sel] if sel.any() else pts
            node_types: dict[str, np.ndarray] = {}
            nodes: dict[str, PartSpec] = {}
            order = list(reversed(struct.postorder()))  # parents first
            for node in order:
                members = struct.observed_below(node)
                par = struct.parent[node]
                ext = _extent(sub, members, cell, tpl)
                if par is None:
                    node_types[node] = np.zeros(len(sub), dtype=int)
                    nodes[node] = latent_spec(node, None, extent=ext)
                    continue
                off = _node_cells(sub, members, cell) - _node_cells(sub, struct.observed_below(par), cell)
                latent = node not in struct.observed
                K = 1 if latent else K_limb
                types = np.zeros(len(sub), dtype=int) if latent else _type_clusters(off, K, rng_seed)
                node_types[node] = types
                Kp = nodes[par].num_types
                anchors, compat = _anchors_and_compat(off, types, node_types[par], K, Kp)
                if latent:
                    spec = latent_spec(node, par, Kp, anchors[0], ext)
                    spec.compat = compat
                else:
                    spec = PartSpec(node, par, np.zeros((K, tpl, tpl, dim)), np.zeros(K), anchors,
                                    np.tile(DEFAULT_DEFORMATION, (K, 1)), compat, (tpl, tpl))
                nodes[node] = spec
            # keep structure order for determinism
            nodes = {n: nodes[n] for n in struct.parent}
            mixtures.append(MixtureModel(struct, nodes))
        subtrees[st.name] = SubTreeModel(st.name, st.parent, mixtures, anchor,
                                         _extent(pts, st.part_names, cell, tpl),
                                         parent_mix_count[st.parent])
    base_meta = {"cell_size": int(cell_size), "feature_dim": dim, "seed": rng_seed,
                 "K_limb": int(K_limb), "K_other": int(K_other)}
    if meta:
        base_meta.update(meta)
    return PoseModel(upper, subtrees, OcclusionParams(), base_meta)


def _latent_extent_members(name: str) -> tuple[str, ...]:
    if name == "U.Body":
        return layout.LATENT_MEMBERS["U.Body"] + tuple(
            n for st in layout.SUBTREES if st.parent == "U.Body" for n in st.part_names)
    if name == "L.Body":
        return layout.LATENT_MEMBERS["L.Body"] + tuple(
            n for st in layout.SUBTREES if st.parent == "L.Body" for n in st.part_names)
    return layout.PART_NAMES


def _extent(points: np.ndarray, names, cell: float, tpl: int) -> tuple[int, int]:
    """Mean bounding-box size (cells) of the named parts, padded by one template."""
    idx = [layout.PART_INDEX[n] for n in names]
    xy = points[:, idx]
    span = xy.max(axis=1) - xy.min(axis=1)
    w, h = span.mean(axis=0) / cell if len(xy) else (0.0, 0.0)
    return (_odd(h + tpl), _odd(w + tpl))


# ----------------------------------------------------------------------------------------
# flat parameter vector


@dataclass(frozen=True)
class Block:
    key: tuple
    offset: int
    size: int
    shape: tuple[int, ...]
    mask: np.ndarray | None = None  # learnable entries of a compat table
    quadratic: tuple[int, ...] = ()  # flat positions (within block) constrained >= floor


class ParamIndex:
    """Maps every learnable array of a model to a slice of one weight vector."""

    def __init__(self, model: PoseModel):
        self.blocks: dict[tuple, Block] = {}
        self.size = 0
        for key, arr in _arrays(model):
            self._add(key, arr)

    def _add(self, key, arr):
        kind = key[-1]
        mask = None
        quad: tuple[int, ...] = ()
        if kind == "compat":
            mask = np.isfinite(arr)
            size = int(mask.sum())
        else:
            size = arr.size
        if kind == "deformation":
            quad = tuple(int(i) for k in range(arr.shape[0]) for i in (4 * k, 4 * k + 2))
        elif kind == "root_deformation":
            quad = (0, 2)
        if size == 0:
            return
        self.blocks[key] = Block(key, self.size, size, arr.shape, mask, quad)
        self.size += size

    def __getitem__(self, key) -> Block:
        return self.blocks[key]

    def quadratic_positions(self, keys=None) -> np.ndarray:
        pos = [b.offset + q for k, b in self.blocks.items() if keys is None or k in keys for q in b.quadratic]
        return np.array(sorted(pos), dtype=int)

    def select(self, prefix: tuple) -> np.ndarray:
        """Global positions of all blocks whose key starts with ``prefix``."""
        idx = [np.arange(b.offset, b.offset + b.size) for k, b in self.blocks.items()
               if k[:len(prefix)] == prefix]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=int)

    def compat_position(self, key, k: int, kp: int) -> int | None:
        b = self.blocks.get(key)
        if b is None or not b.mask[k, kp]:
            return None
        return b.offset + int(b.mask.ravel()[: k * b.shape[1] + kp].sum())

    def to_vector(self, model: PoseModel) -> np.ndarray:
        w = np.zeros(self.size)
        for key, arr in _arrays(model):
            b = self.blocks.get(key)
            if b is None:
                continue
            w[b.offset:b.offset + b.size] = arr[b.mask] if b.mask is not None else arr.ravel()
        return w

    def to_model(self, model: PoseModel, w: np.ndarray) -> PoseModel:
        out = model.copy()
        for key, arr in _arrays(out):
            b = self.blocks.get(key)
            if b is None:
                continue
            seg = w[b.offset:b.offset + b.size]
            if b.mask is not None:
                arr[b.mask] = seg
            else:
                arr[...] = seg.reshape(arr.shape)
        return out


def _spec_arrays(prefix: tuple, spec: PartSpec):
    if not spec.latent:
        yield prefix + ("templates",), spec.templates
        yield prefix + ("biases",), spec.biases
    if spec.parent is not None:
        yield prefix + ("deformation",), spec.deformation
        yield prefix + ("compat",), spec.compat


def _arrays(model: PoseModel):
    for n, spec in model.upper.items():
        yield from _spec_arrays(("upper", n), spec)
    for name, st in model.subtrees.items():
        for m, mix in enumerate(st.mixtures):
            yield ("sub", name, m, "bias"), mix.bias
            yield ("sub", name, m, "root_deformation"), mix.root_deformation
            for node, spec in mix.nodes.items():
                yield from _spec_arrays(("sub", name, m, node), spec)
