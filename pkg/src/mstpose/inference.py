"""Exact MAP inference over the two-layer tree.

Each level of the pyramid is processed independently: unary maps from
template correlation, upward messages with quadratic distance transforms
inside every sub-tree mixture, a max over mixtures at each sub-tree root,
then the upper layer up to ``Root``.  Detections are non-maximum suppressed
across levels and backtracked to every node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import layout
from .dt import quadratic_dt
from .features import FeatureMap, FeaturePyramid, pad_features
from .geometry import Box, ScoreMap, cell_box, map_candidates, nms_candidates
from .model import ParamIndex, PartSpec, PoseModel, SubTreeModel, deformation_features, dt_coefficients, latent_spec
from .structure import ROOT

DEFAULT_THRESHOLD = -1.0


@dataclass
class Message:
    """Child-to-parent message with the arg-max needed for backtracking."""

    value: np.ndarray  # (K_parent, H, W)
    argtype: np.ndarray  # (K_parent, H, W) best child type
    iy: np.ndarray  # (K_child, H, W) best child row for each child type
    ix: np.ndarray  # (K_child, H, W)


@dataclass
class PartPlacement:
    y: int
    x: int
    type_id: int
    box: Box


@dataclass
class PoseEstimate:
    score: float
    level: int
    scale: float
    parts: dict[str, PartPlacement] = field(default_factory=dict)
    latent: dict[str, tuple[int, int, int]] = field(default_factory=dict)
    mixtures: dict[str, int] = field(default_factory=dict)
    penalty: float = 0.0

    def points(self) -> np.ndarray:
        """(26, 2) image (x, y) coordinates of the part centres."""
        out = np.zeros((layout.NUM_PARTS, 2))
        for name, p in self.parts.items():
            out[layout.PART_INDEX[name]] = ((p.x + 0.5) * self.scale, (p.y + 0.5) * self.scale)
        return out


class LevelContext:
    """Per-level feature patches shared by every template of one size."""

    def __init__(self, fmap: FeatureMap):
        self.fmap = fmap
        self.level = fmap.level
        self.scale = fmap.scale
        self.H, self.W = fmap.rows, fmap.cols
        self._patches: dict[tuple[int, int], np.ndarray] = {}

    def patches(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._patches:
            padded = pad_features(self.fmap.data, h, w)
            win = sliding_window_view(padded, (h, w), axis=(0, 1))  # (H, W, D, h, w)
            self._patches[key] = np.ascontiguousarray(
                win.transpose(0, 1, 3, 4, 2).reshape(self.H * self.W, -1))
        return self._patches[key]

    def unary(self, spec: PartSpec) -> np.ndarray:
        if spec.latent:
            return np.zeros((1, self.H, self.W))
        K, h, w, _ = spec.templates.shape
        resp = self.patches(h, w) @ spec.templates.reshape(K, -1).T
        return resp.T.reshape(K, self.H, self.W) + spec.biases[:, None, None]


def unary_maps(pyramid: FeaturePyramid, model: PoseModel) -> list[dict[str, ScoreMap]]:
    """Score maps of every node at every level; latent nodes are all-zero."""
    out = []
    for fmap in pyramid.levels:
        ctx = LevelContext(fmap)
        maps = {}
        for n, spec in model.upper.items():
            maps[n] = ScoreMap(n, fmap.level, ctx.unary(spec), fmap.scale, spec.extent)
        for name, st in model.subtrees.items():
            for m, mix in enumerate(st.mixtures):
                for node, spec in mix.nodes.items():
                    key = f"{name}/m{m}/{node}"
                    maps[key] = ScoreMap(key, fmap.level, ctx.unary(spec), fmap.scale, spec.extent)
        out.append(maps)
    return out


def pass_message(child_score: np.ndarray, spec: PartSpec) -> Message:
    """Max over child types and locations of compatibility + deformed child score."""
    Kc, H, W = child_score.shape
    Kp = spec.compat.shape[1]
    dts = np.empty((Kc, H, W))
    iy = np.empty((Kc, H, W), dtype=np.int64)
    ix = np.empty((Kc, H, W), dtype=np.int64)
    for k in range(Kc):
        dts[k], (iy[k], ix[k]) = quadratic_dt(child_score[k], dt_coefficients(spec.deformation[k]), spec.anchors[k])
    value = np.full((Kp, H, W), -np.inf)
    argtype = np.zeros((Kp, H, W), dtype=np.int64)
    for kp in range(Kp):
        for k in range(Kc):
            c = spec.compat[k, kp]
            if c == -np.inf:
                continue
            cand = dts[k] + c
            better = cand > value[kp]
            value[kp][better] = cand[better]
            argtype[kp][better] = k
    return Message(value, argtype, iy, ix)


def run_tree(order: list[str], specs: dict[str, PartSpec], unary: dict[str, np.ndarray]):
    """Upward pass over nodes given children-first; returns (scores, messages)."""
    scores: dict[str, np.ndarray] = {}
    msgs: dict[str, Message] = {}
    for n in order:
        s = unary[n].copy()
        for c, m in msgs.items():
            if specs[c].parent == n:
                s += m.value
        scores[n] = s
        if specs[n].parent is not None:
            msgs[n] = pass_message(s, specs[n])
    return scores, msgs


def _descend(order: list[str], specs: dict[str, PartSpec], msgs: dict[str, Message],
             root: str, y: int, x: int, k: int = 0) -> dict[str, tuple[int, int, int]]:
    placed = {root: (y, x, k)}
    for n in reversed(order):
        if n == root or n not in msgs:
            continue
        py, px, pk = placed[specs[n].parent]
        msg = msgs[n]
        ck = int(msg.argtype[pk, py, px])
        placed[n] = (int(msg.iy[ck, py, px]), int(msg.ix[ck, py, px]), ck)
    return placed


@dataclass
class MixtureResult:
    order: list[str]
    scores: dict[str, np.ndarray]
    messages: dict[str, Message]
    root: np.ndarray  # (H, W) root score plus mixture bias, -inf when gated off


@dataclass
class SubTreeResult:
    name: str
    mixtures: list[MixtureResult]
    penalty: list[np.ndarray | None]
    score: np.ndarray = None  # (H, W)
    argmix: np.ndarray = None  # (H, W)

    def combine(self) -> None:
        stack = np.stack([mr.root + (p if p is not None else 0.0)
                          for mr, p in zip(self.mixtures, self.penalty)])
        self.argmix = np.argmax(stack, axis=0)
        self.score = np.take_along_axis(stack, self.argmix[None], axis=0)[0]


def mixture_scores(st: SubTreeModel, ctx: LevelContext, masks: dict | None = None) -> list[MixtureResult]:
    out = []
    for mix in st.mixtures:
        order = mix.structure.postorder()
        unary = {}
        for node in order:
            u = ctx.unary(mix.nodes[node])
            if masks and node in masks:
                u = u + masks[node]
            unary[node] = u
        scores, msgs = run_tree(order, mix.nodes, unary)
        root = scores[ROOT][0] + float(mix.bias[0])
        if not mix.gate:
            root = np.full_like(root, -np.inf)
        out.append(MixtureResult(order, scores, msgs, root))
    return out


def subtree_level(st: SubTreeModel, ctx: LevelContext, masks: dict | None = None) -> SubTreeResult:
    res = SubTreeResult(st.name, mixture_scores(st, ctx, masks), [None] * st.M)
    res.combine()
    return res


def subtree_scores(st: SubTreeModel, pyramid: FeaturePyramid) -> list[tuple[list[ScoreMap], ScoreMap, np.ndarray]]:
    """Per level: per-mixture root maps, the best-over-mixtures map, and the winning mixture grid."""
    out = []
    for fmap in pyramid.levels:
        ctx = LevelContext(fmap)
        res = subtree_level(st, ctx)
        per_mix = [ScoreMap(f"{st.name}/m{m}", fmap.level, mr.root[None], fmap.scale, st.extent)
                   for m, mr in enumerate(res.mixtures)]
        out.append((per_mix, ScoreMap(st.name, fmap.level, res.score[None], fmap.scale, st.extent),
                    res.argmix))
    return out


def backtrack_mixture(st: SubTreeModel, m: int, mr: MixtureResult, y: int, x: int):
    """Node placements {node: (y, x, type)} of mixture ``m`` with its root at (y, x)."""
    return _descend(mr.order, st.mixtures[m].nodes, mr.messages, ROOT, y, x)


def subtree_edge_spec(st: SubTreeModel, parent_types: int = 1) -> PartSpec:
    spec = latent_spec(st.name, st.parent, parent_types, st.anchor, st.extent)
    spec.deformation = st.effective_deformation()[None].copy()
    return spec


@dataclass
class LevelResult:
    ctx: LevelContext
    subtrees: dict[str, SubTreeResult]
    order: list[str]
    specs: dict[str, PartSpec]
    scores: dict[str, np.ndarray]
    messages: dict[str, Message]

    @property
    def root(self) -> np.ndarray:
        return self.scores["Root"][0]


def upper_specs(model: PoseModel) -> dict[str, PartSpec]:
    specs = dict(model.upper)
    for name, st in model.subtrees.items():
        specs[name] = subtree_edge_spec(st, model.upper[st.parent].num_types)
    return specs


def infer_level(model: PoseModel, fmap: FeatureMap, occlusion: bool = False,
                masks: dict | None = None, occlusion_config: dict | None = None) -> LevelResult:
    ctx = LevelContext(fmap)
    masks = masks or {}
    subs = {name: subtree_level(st, ctx, masks.get(name)) for name, st in model.subtrees.items()}
    if occlusion:
        from .occlusion import apply_occlusion

        apply_occlusion(model, subs, ctx, **(occlusion_config or {}))
    specs = upper_specs(model)
    order = model.upper_postorder()
    unary = {}
    for n in order:
        if n in subs:
            unary[n] = subs[n].score[None]
        else:
            u = ctx.unary(specs[n])
            if n in masks.get("upper", {}):
                u = u + masks["upper"][n]
            unary[n] = u
    scores, msgs = run_tree(order, specs, unary)
    return LevelResult(ctx, subs, order, specs, scores, msgs)


def backtrack(model: PoseModel, lr: LevelResult, y: int, x: int) -> PoseEstimate:
    placed = _descend(lr.order, lr.specs, lr.messages, "Root", y, x)
    est = PoseEstimate(float(lr.root[y, x]), lr.ctx.level, lr.ctx.scale)
    for n, (py, px, k) in placed.items():
        if n in model.subtrees:
            st = model.subtrees[n]
            res = lr.subtrees[n]
            m = int(res.argmix[py, px])
            est.mixtures[n] = m
            est.latent[n] = (py, px, 0)
            pen = res.penalty[m]
            if pen is not None:
                est.penalty += float(pen[py, px])
            for node, (ny, nx, nk) in backtrack_mixture(st, m, res.mixtures[m], py, px).items():
                spec = st.mixtures[m].nodes[node]
                if spec.latent:
                    if node != ROOT:
                        est.latent[f"{n}/{node}"] = (ny, nx, nk)
                else:
                    est.parts[node] = PartPlacement(ny, nx, nk, cell_box(ny, nx, lr.ctx.scale, spec.extent))
        elif lr.specs[n].latent:
            est.latent[n] = (py, px, k)
        else:
            est.parts[n] = PartPlacement(py, px, k, cell_box(py, px, lr.ctx.scale, lr.specs[n].extent))
    return est


def infer(model: PoseModel, pyramid: FeaturePyramid, detection_threshold: float = DEFAULT_THRESHOLD,
          occlusion: bool = False, overlap: float = 0.5, max_detections: int | None = None,
          occlusion_config: dict | None = None) -> list[PoseEstimate]:
    """Detections above threshold, best first, each backtracked to all parts."""
    results = []
    cands = []
    extent = model.upper["Root"].extent
    for li, fmap in enumerate(pyramid.levels):
        lr = infer_level(model, fmap, occlusion, occlusion_config=occlusion_config)
        results.append(lr)
        smap = ScoreMap("Root", fmap.level, lr.scores["Root"], fmap.scale, extent)
        cands += [c for c in map_candidates(smap, detection_threshold)]
    kept = nms_candidates(cands, overlap, max_detections)
    by_level = {lr.ctx.level: lr for lr in results}
    return [backtrack(model, by_level[c.pyramid_level], *c.location) for c in kept]


# ----------------------------------------------------------------------------------------
# joint feature vector of a configuration


def _deformation_features(child: tuple[int, int], parent: tuple[int, int], anchor) -> np.ndarray:
    dy = child[0] - (parent[0] + anchor[0])
    dx = child[1] - (parent[1] + anchor[1])
    return deformation_features(dy, dx)


class FeatureAccumulator:
    """Collects sparse (position, value) pieces of a joint feature vector."""

    def __init__(self):
        self.pos: list[np.ndarray] = []
        self.val: list[np.ndarray] = []

    def add(self, p, v) -> None:
        self.pos.append(np.atleast_1d(np.asarray(p, dtype=np.int64)))
        self.val.append(np.atleast_1d(np.asarray(v, dtype=float)))

    def result(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.pos:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        return np.concatenate(self.pos), np.concatenate(self.val)


def node_features(acc: FeatureAccumulator, index: ParamIndex, prefix: tuple, spec: PartSpec,
                  ctx: LevelContext, here, k: int, parent_here=None, parent_k: int = 0) -> None:
    y, x = here
    if not spec.latent:
        K, h, w, D = spec.templates.shape
        blk = index[prefix + ("templates",)]
        n = h * w * D
        acc.add(np.arange(blk.offset + k * n, blk.offset + (k + 1) * n), ctx.patches(h, w)[y * ctx.W + x])
        acc.add(index[prefix + ("biases",)].offset + k, 1.0)
    if spec.parent is not None:
        blk = index[prefix + ("deformation",)]
        acc.add(np.arange(blk.offset + 4 * k, blk.offset + 4 * k + 4),
                _deformation_features(here, parent_here, spec.anchors[k]))
        cp = index.compat_position(prefix + ("compat",), k, parent_k)
        if cp is not None:
            acc.add(cp, 1.0)


def mixture_features(acc: FeatureAccumulator, index: ParamIndex, st: SubTreeModel, m: int,
                     placed: dict[str, tuple[int, int, int]], ctx: LevelContext) -> None:
    """Terms of one sub-tree mixture; ``placed`` maps every mixture node to (y, x, type)."""
    mix = st.mixtures[m]
    acc.add(index[("sub", st.name, m, "bias")].offset, 1.0)
    for node, spec in mix.nodes.items():
        y, x, k = placed[node]
        if spec.parent is None:
            node_features(acc, index, ("sub", st.name, m, node), spec, ctx, (y, x), k)
        else:
            py, px, pk = placed[spec.parent]
            node_features(acc, index, ("sub", st.name, m, node), spec, ctx, (y, x), k, (py, px), pk)


def placed_mixture(st: SubTreeModel, est: PoseEstimate) -> dict[str, tuple[int, int, int]]:
    m = est.mixtures[st.name]
    out = {}
    for node in st.mixtures[m].nodes:
        if node == ROOT:
            out[node] = est.latent[st.name]
        elif node in est.parts:
            p = est.parts[node]
            out[node] = (p.y, p.x, p.type_id)
        else:
            out[node] = est.latent[f"{st.name}/{node}"]
    return out


def configuration_features(model: PoseModel, index: ParamIndex, ctx: LevelContext,
                           est: PoseEstimate) -> tuple[np.ndarray, np.ndarray]:
    """Sparse (positions, values) with w . phi equal to the configuration's score (penalty excluded)."""
    acc = FeatureAccumulator()

    def loc(n):
        if n in est.parts:
            p = est.parts[n]
            return (p.y, p.x), p.type_id
        y, x, k = est.latent[n]
        return (y, x), k

    for n, spec in model.upper.items():
        here, k = loc(n)
        if spec.parent is None:
            node_features(acc, index, ("upper", n), spec, ctx, here, k)
        else:
            ph, pk = loc(spec.parent)
            node_features(acc, index, ("upper", n), spec, ctx, here, k, ph, pk)
    for name, st in model.subtrees.items():
        root_here, _ = loc(name)
        ph, _ = loc(st.parent)
        d = _deformation_features(root_here, ph, st.anchor) / st.z_norm
        for mm in range(st.M):
            blk = index[("sub", name, mm, "root_deformation")]
            acc.add(np.arange(blk.offset, blk.offset + 4), d)
        mixture_features(acc, index, st, est.mixtures[name], placed_mixture(st, est), ctx)
    return acc.result()


def rescore(model: PoseModel, pyramid: FeaturePyramid, est: PoseEstimate,
            index: ParamIndex | None = None) -> float:
    """Objective of a configuration evaluated term by term (plus any occlusion penalty)."""
    index = index or ParamIndex(model)
    w = index.to_vector(model)
    ctx = LevelContext(pyramid.levels[est.level])
    pos, val = configuration_features(model, index, ctx, est)
    return float(w[pos] @ val) + est.penalty


def part_scores(model: PoseModel, pyramid: FeaturePyramid, est: PoseEstimate) -> dict[str, float]:
    """Appearance score (template response plus type bias) of each placed part."""
    ctx = LevelContext(pyramid.levels[est.level])
    specs = dict(model.upper)
    for name, st in model.subtrees.items():
        if name in est.mixtures:
            specs.update(st.mixtures[est.mixtures[name]].nodes)
    out = {}
    for n, p in est.parts.items():
        spec = specs[n]
        K, h, w, D = spec.templates.shape
        out[n] = float(ctx.patches(h, w)[p.y * ctx.W + p.x] @ spec.templates[p.type_id].reshape(-1)
                       + spec.biases[p.type_id])
    return out


def pyramid_for(model: PoseModel, image: np.ndarray) -> FeaturePyramid:
    """Feature pyramid with the model's cell size, interval, clip and level cap."""
    from .features import DEFAULT_CLIP, build_pyramid

    meta = model.meta
    return build_pyramid(image, interval=int(meta.get("interval", 4)), cell_size=model.cell_size,
                         clip=float(meta.get("clip", DEFAULT_CLIP)),
                         max_levels=int(meta["max_levels"]) if meta.get("max_levels") else None)


def detect(model: PoseModel, image: np.ndarray, occlusion: bool = False, threshold: float | None = None,
           max_detections: int | None = None, overlap: float = 0.5) -> list[PoseEstimate]:
    thr = float(model.meta.get("threshold", DEFAULT_THRESHOLD)) if threshold is None else threshold
    return infer(model, pyramid_for(model, image), thr, occlusion=occlusion, overlap=overlap,
                 max_detections=max_detections, occlusion_config=model.meta.get("occlusion_config"))
