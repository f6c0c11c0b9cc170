"""Latent max-margin training and occlusion parameter estimation.

Objective on fixed latent assignments:

    1/2 ||w||^2 + C * sum_n max(0, 1 - y_n w . x_n)

minimised by projected stochastic sub-gradient steps with eta_t = 1/(t + t0).
Quadratic deformation weights are kept >= 1e-4 after every step, and each
linear weight is bounded by its quadratic partner.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import layout
from .config import TrainConfig
from .features import FeaturePyramid, build_pyramid
from .geometry import Box, ScoreMap, iou, map_candidates, nms_candidates
from .inference import (FeatureAccumulator, LevelContext, PoseEstimate, backtrack, configuration_features,
                        infer, infer_level, mixture_features, subtree_level, backtrack_mixture)
from .model import ParamIndex, PoseModel, SubTreeModel, init_parameters, OcclusionParams
from .occlusion import corresponding_part
from .structure import build_descriptors, learn_structures

log = logging.getLogger(__name__)

QUAD_FLOOR = 1e-4
REST_RADIUS = 1.0  # in displacement units
MARGIN = -1.0


@dataclass
class Example:
    pos: np.ndarray  # positions in the weight vector
    val: np.ndarray
    y: int
    key: tuple = ()

    def score(self, w: np.ndarray) -> float:
        return float(w[self.pos] @ self.val)


@dataclass
class SvmState:
    w: np.ndarray
    C: float
    t0: float = 10.0
    t: int = 0
    floor: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))  # quadratic positions
    history: list[float] = field(default_factory=list)
    iterate: np.ndarray | None = None  # the raw SGD iterate; w holds the best one seen


def objective(w: np.ndarray, examples: list[Example], C: float) -> float:
    hinge = sum(max(0.0, 1.0 - e.y * e.score(w)) for e in examples)
    return 0.5 * float(w @ w) + C * hinge


def hinge_violations(w: np.ndarray, examples: list[Example]) -> int:
    return sum(1 for e in examples if e.y * e.score(w) < 1.0)


def step_offset(examples: list[Example], C: float, t0: float) -> float:
    """Offset large enough that an early step moves a typical positive margin by about one.

    Positives set the scale: mined negatives can carry very large deformation
    features, and letting them set t0 stalls learning.
    """
    pos = [e for e in examples if e.y > 0] or examples
    if not pos:
        return t0
    sq = np.median([float(e.val @ e.val) for e in pos])
    return max(t0, len(examples) * C * sq)


def svm_epoch(state: SvmState, examples: list[Example], rng: np.random.Generator | None = None) -> float:
    """One pass of projected stochastic sub-gradient; returns the objective afterwards.

    After each step the deformation weights are projected (see ``project``) and w is
    projected onto the ball ||w|| <= sqrt(2 C n), which contains the optimum.
    The SGD iterate runs on undisturbed in ``state.iterate``; ``state.w`` takes it
    over only when it does not raise the objective on these examples, so the
    returned objective never increases across passes over a fixed example set.
    """
    n = len(examples)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    if state.iterate is None:
        state.iterate = state.w.copy()
    w = state.iterate
    scale = n * state.C
    radius = np.sqrt(2.0 * scale) if scale > 0 else 0.0
    for i in order:
        e = examples[i]
        eta = 1.0 / (state.t + state.t0)
        margin = e.y * float(w[e.pos] @ e.val)
        w *= 1.0 - eta
        if margin < 1.0 and scale > 0:
            np.add.at(w, e.pos, eta * scale * e.y * e.val)
        norm = float(np.sqrt(w @ w))
        if norm > radius:
            w *= radius / norm
        project(w, state.floor)
        state.t += 1
    obj = objective(w, examples, state.C)
    if not np.isfinite(obj) or not np.all(np.isfinite(w)):
        bad = np.nonzero(~np.isfinite(w))[0][:10]
        raise FloatingPointError(f"non-finite weights after {state.t} steps (first bad positions {bad.tolist()})")
    best = objective(state.w, examples, state.C)
    if obj <= best:
        state.w[:] = w
    else:
        obj = best
    state.history.append(obj)
    return obj


def project(w: np.ndarray, floor: np.ndarray) -> np.ndarray:
    """Floor the quadratic deformation weights and bound each linear weight by
    2 * REST_RADIUS * its quadratic partner, so the rest position of a part
    stays within REST_RADIUS displacement units of its anchor.

    ``floor`` holds the quadratic positions; the linear weight follows each.
    """
    if floor.size:
        a = np.maximum(w[floor], QUAD_FLOOR)
        w[floor] = a
        lim = 2.0 * REST_RADIUS * a
        w[floor + 1] = np.clip(w[floor + 1], -lim, lim)
    return w


# ----------------------------------------------------------------------------------------
# data


@dataclass
class Sample:
    pyramid: FeaturePyramid
    points: np.ndarray | None  # None for negatives
    name: str = ""


def make_pyramid(image: np.ndarray, cfg: TrainConfig) -> FeaturePyramid:
    return build_pyramid(image, interval=cfg.interval, cell_size=cfg.cell_size, clip=cfg.clip,
                         max_levels=cfg.max_levels or None)


def samples_from_manifest(manifest, cfg: TrainConfig, jobs: int = 1) -> tuple[list[Sample], list[Sample]]:
    """(positives, negatives) with pyramids built, augmented per ``cfg.mirror`` / ``cfg.rotations``."""
    from .evaluation import augment, load_entry_image

    if cfg.mirror or cfg.rotation_list():
        manifest = augment(manifest, cfg.rotation_list(), cfg.mirror, cfg.seed)

    def one(e):
        pts = None if e.negative else np.asarray(e.points, dtype=float)
        return Sample(make_pyramid(load_entry_image(manifest, e), cfg), pts, e.flag() + ":" + e.path)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            samples = list(ex.map(one, manifest.entries))
    else:
        samples = [one(e) for e in manifest.entries]
    return [s for s in samples if s.points is not None], [s for s in samples if s.points is None]


def choose_level(model: PoseModel, pyramid: FeaturePyramid, points: np.ndarray) -> int:
    """Level whose cell size brings the figure closest to the model's training scale."""
    target = float(model.meta.get("torso_cells", 0.0))
    torso = layout.torso_height(points)
    if target <= 0 or torso <= 0:
        return 0
    errs = [abs(np.log(torso / f.scale) - np.log(target)) for f in pyramid.levels]
    return int(np.argmin(errs))


def annotation_cells(points: np.ndarray, scale: float, shape: tuple[int, int]) -> np.ndarray:
    """(26, 2) (row, col) cells of the annotated parts, snapped into the grid."""
    cells = np.floor(np.asarray(points, dtype=float)[:, ::-1] / scale).astype(int)
    cells[:, 0] = np.clip(cells[:, 0], 0, shape[0] - 1)
    cells[:, 1] = np.clip(cells[:, 1], 0, shape[1] - 1)
    return cells


def _window(cell, shape, radius) -> np.ndarray:
    m = np.full(shape, -np.inf)
    y, x = cell
    m[max(0, y - radius):y + radius + 1, max(0, x - radius):x + radius + 1] = 0.0
    return m


def constraint_masks(model: PoseModel, points: np.ndarray, shape: tuple[int, int], scale: float,
                     radius: int = 1) -> dict:
    cells = annotation_cells(points, scale, shape)
    masks: dict = {"upper": {}}
    for n in layout.UPPER_OBSERVED:
        masks["upper"][n] = _window(cells[layout.PART_INDEX[n]], shape, radius)
    for name, st in model.subtrees.items():
        masks[name] = {p: _window(cells[layout.PART_INDEX[p]], shape, radius)
                       for p in layout.SUBTREES[layout.SUBTREE_INDEX[name]].part_names}
    return masks


def latent_completion(model: PoseModel, pyramid: FeaturePyramid, points: np.ndarray,
                      radius: int = 1, level: int | None = None) -> PoseEstimate:
    """Best configuration with every observed part within ``radius`` cells of its annotation."""
    li = choose_level(model, pyramid, points) if level is None else level
    fmap = pyramid.levels[li]
    masks = constraint_masks(model, points, (fmap.rows, fmap.cols), fmap.scale, radius)
    lr = infer_level(model, fmap, masks=masks)
    root = lr.root
    y, x = np.unravel_index(int(np.argmax(root)), root.shape)
    return backtrack(model, lr, int(y), int(x))


def subtree_completion(st: SubTreeModel, pyramid: FeaturePyramid, points: np.ndarray, radius: int,
                       level: int):
    """(mixture, placements, score, ctx) of the best constrained sub-tree configuration."""
    fmap = pyramid.levels[level]
    ctx = LevelContext(fmap)
    cells = annotation_cells(points, fmap.scale, (fmap.rows, fmap.cols))
    masks = {p: _window(cells[layout.PART_INDEX[p]], (fmap.rows, fmap.cols), radius)
             for p in layout.SUBTREES[layout.SUBTREE_INDEX[st.name]].part_names}
    res = subtree_level(st, ctx, masks)
    y, x = np.unravel_index(int(np.argmax(res.score)), res.score.shape)
    m = int(res.argmix[y, x])
    placed = backtrack_mixture(st, m, res.mixtures[m], int(y), int(x))
    return m, placed, float(res.score[y, x]), ctx


def subtree_example(st: SubTreeModel, index: ParamIndex, m: int, placed, ctx, y: int, key=()) -> Example:
    acc = FeatureAccumulator()
    mixture_features(acc, index, st, m, placed, ctx)
    pos, val = acc.result()
    return Example(pos, val, y, key)


def mislocalised(pred: np.ndarray, truth: np.ndarray, tol: float) -> bool:
    """Mean part error above ``tol`` times the torso height of ``truth``."""
    err = np.linalg.norm(np.asarray(pred) - np.asarray(truth), axis=1).mean()
    return bool(err > tol * layout.torso_height(truth))


def _placed_points(st: SubTreeModel, m: int, placed, scale: float) -> tuple[list[str], np.ndarray]:
    names = [n for n in placed if not st.mixtures[m].nodes[n].latent]
    pts = np.array([((placed[n][1] + 0.5) * scale, (placed[n][0] + 0.5) * scale) for n in names])
    return names, pts


def mine_subtree_negatives(st: SubTreeModel, index: ParamIndex, negatives: list[Sample], per_image: int,
                           cache_limit: int, overlap: float = 0.5, positives: list[Sample] = (),
                           pose_per_image: int = 0, pose_tol: float = 0.25) -> list[tuple[float, Example]]:
    """Sub-tree detections scoring above -1 on person-free images and, when
    ``pose_per_image`` > 0, mislocalised ones on positive images."""
    found = []
    jobs = [("neg", ni, s, per_image, overlap) for ni, s in enumerate(negatives)]
    if pose_per_image > 0:
        jobs += [("pose", ni, s, pose_per_image, 1.0) for ni, s in enumerate(positives)]
    for tag, ni, s, limit, ov in jobs:
        cands = []
        results = {}
        for fmap in s.pyramid.levels:
            ctx = LevelContext(fmap)
            res = subtree_level(st, ctx)
            results[fmap.level] = (ctx, res)
            smap = ScoreMap(st.name, fmap.level, res.score[None], fmap.scale, st.extent)
            cands += [c for c in map_candidates(smap, MARGIN) if c.score > MARGIN]
        kept = 0
        for c in nms_candidates(cands, ov, None if tag == "pose" else limit):
            ctx, res = results[c.pyramid_level]
            y, x = c.location
            m = int(res.argmix[y, x])
            placed = backtrack_mixture(st, m, res.mixtures[m], y, x)
            if tag == "pose":
                names, pts = _placed_points(st, m, placed, ctx.scale)
                truth = s.points[[layout.PART_INDEX[n] for n in names]]
                err = np.linalg.norm(pts - truth, axis=1).mean()
                if err <= pose_tol * layout.torso_height(s.points):
                    continue
            key = (tag, ni, c.pyramid_level, y, x, m)
            found.append((c.score, subtree_example(st, index, m, placed, ctx, -1, key)))
            kept += 1
            if kept >= limit:
                break
    found.sort(key=lambda t: (-t[0], t[1].key))
    return found[:cache_limit]


def mine_hard_negatives(model: PoseModel, negatives: list[Sample], cache_limit: int, per_image: int = 3,
                        index: ParamIndex | None = None, overlap: float = 0.5, positives: list[Sample] = (),
                        pose_per_image: int = 0, pose_tol: float = 0.25) -> list[tuple[float, Example]]:
    """Detections scoring above -1 on person-free images, plus mislocalised
    detections on positive images, highest first, at most ``cache_limit``."""
    index = index or ParamIndex(model)
    found = []
    jobs = [("neg", ni, s, per_image, overlap) for ni, s in enumerate(negatives)]
    if pose_per_image > 0:
        jobs += [("pose", ni, s, pose_per_image, 1.0) for ni, s in enumerate(positives)]
    for tag, ni, s, limit, ov in jobs:
        # for positives look a little deeper, since the best detections may be correct
        ests = infer(model, s.pyramid, MARGIN, overlap=ov, max_detections=limit if tag == "neg" else 4 * limit)
        kept = 0
        for est in ests:
            if est.score <= MARGIN:
                continue
            if tag == "pose" and not mislocalised(est.points(), s.points, pose_tol):
                continue
            ctx = LevelContext(s.pyramid.levels[est.level])
            pos, val = configuration_features(model, index, ctx, est)
            root = est.latent["Root"]
            found.append((est.score, Example(pos, val, -1, (tag, ni, est.level, root[0], root[1]))))
            kept += 1
            if kept >= limit:
                break
    found.sort(key=lambda t: (-t[0], t[1].key))
    return found[:cache_limit]


# ----------------------------------------------------------------------------------------
# training stages


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)  # (stage, round, epoch, objective, positives, negatives)

    def add(self, *row) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        lines = ["stage,round,epoch,objective,positives,negatives"]
        lines += [f"{s},{r},{e},{o!r},{p},{n}" for s, r, e, o, p, n in self.rows]
        return "\n".join(lines) + "\n"


def _run_svm(state: SvmState, examples: list[Example], epochs: int, rng, log_rows, tag) -> None:
    state.t0 = max(state.t0, step_offset(examples, state.C, state.t0))
    for ep in range(epochs):
        obj = svm_epoch(state, examples, rng)
        log_rows(ep, obj)
        log.debug("%s epoch %d objective %.6f", tag, ep, obj)


def _localize(examples: list[Example], g2l: np.ndarray) -> list[Example]:
    out = []
    for e in examples:
        loc = g2l[e.pos]
        if (loc < 0).any():
            raise ValueError("example touches weights outside the active block")
        out.append(Example(loc, e.val, e.y, e.key))
    return out


def _merge_cache(cache: dict, new: list[tuple[float, Example]], limit: int, w: np.ndarray) -> list[Example]:
    for s, e in new:
        cache[e.key] = e
    # keep the hardest (highest scoring) negatives under the current weights
    ranked = sorted(cache.values(), key=lambda e: (-e.score(w), e.key))[:limit]
    cache.clear()
    cache.update({e.key: e for e in ranked})
    return ranked


def _pmap(fn, items, jobs: int):
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def train_subtree_stage(model: PoseModel, positives: list[Sample], negatives: list[Sample], cfg: TrainConfig,
                        train_log: TrainLog | None = None, jobs: int = 1) -> PoseModel:
    """Train each sub-tree as an independent latent-SVM detector (upper layer untouched)."""
    train_log = train_log if train_log is not None else TrainLog()
    index = ParamIndex(model)
    w_full = index.to_vector(model)
    rng = np.random.default_rng(cfg.seed)
    for name in model.subtrees:
        # the root-to-parent deformation has no data term until the full stage
        active = np.concatenate([np.arange(b.offset, b.offset + b.size) for k, b in index.blocks.items()
                                 if k[:2] == ("sub", name) and k[-1] != "root_deformation"])
        g2l = np.full(index.size, -1, dtype=np.int64)
        g2l[active] = np.arange(active.size)
        floor = g2l[index.quadratic_positions()]
        floor = floor[floor >= 0]
        state = SvmState(w_full[active].copy(), cfg.C_subtree, cfg.t0, 0, floor)
        cache: dict = {}
        for rnd in range(cfg.rounds_subtree):
            w_full[active] = state.w
            cur = index.to_model(model, w_full)
            st = cur.subtrees[name]

            def complete(item):
                k, s = item
                lvl = choose_level(cur, s.pyramid, s.points)
                m, placed, _, ctx = subtree_completion(st, s.pyramid, s.points, cfg.radius, lvl)
                return subtree_example(st, index, m, placed, ctx, +1, ("pos", k))

            pos = _pmap(complete, list(enumerate(positives)), jobs)
            neg_new = mine_subtree_negatives(st, index, negatives, cfg.neg_per_image, cfg.neg_cache,
                                             positives=positives, pose_per_image=cfg.pose_negatives,
                                             pose_tol=cfg.pose_tol)
            negs = _merge_cache(cache, neg_new, cfg.neg_cache, w_full)
            examples = _localize(pos + negs, g2l)
            _run_svm(state, examples, cfg.epochs, rng,
                     lambda ep, obj: train_log.add(f"sub:{name}", rnd, ep, obj, len(pos), len(negs)),
                     f"{name} round {rnd}")
        w_full[active] = state.w
        _flag_low_data(model, name, positives, index, w_full)
    return index.to_model(model, w_full)


def _flag_low_data(model: PoseModel, name: str, positives, index, w) -> None:
    assign = model.meta.get("assignments", {}).get(name)
    if assign is None:
        return
    counts = np.bincount(np.asarray(assign), minlength=model.subtrees[name].M)
    for m, c in enumerate(counts):
        if c < 3:
            log.warning("%s mixture %d trained on %d positives (low data)", name, m, int(c))
            model.meta.setdefault("low_data", []).append(f"{name}/m{m}")


def full_examples(model: PoseModel, index: ParamIndex, positives: list[Sample], radius: int,
                  jobs: int = 1) -> list[Example]:
    def complete(item):
        k, s = item
        est = latent_completion(model, s.pyramid, s.points, radius)
        ctx = LevelContext(s.pyramid.levels[est.level])
        pos, val = configuration_features(model, index, ctx, est)
        return Example(pos, val, +1, ("pos", k))

    return _pmap(complete, list(enumerate(positives)), jobs)


def train_full_stage(model: PoseModel, positives: list[Sample], negatives: list[Sample], cfg: TrainConfig,
                     train_log: TrainLog | None = None, jobs: int = 1) -> PoseModel:
    """Joint latent SVM over all parameters, starting from the given (stage-one) weights."""
    train_log = train_log if train_log is not None else TrainLog()
    index = ParamIndex(model)
    state = SvmState(index.to_vector(model), cfg.C_full, cfg.t0, 0, index.quadratic_positions())
    project(state.w, state.floor)
    rng = np.random.default_rng(cfg.seed + 1)
    cache: dict = {}
    for rnd in range(cfg.rounds_full):
        cur = index.to_model(model, state.w)
        pos = full_examples(cur, index, positives, cfg.radius, jobs)
        neg_new = mine_hard_negatives(cur, negatives, cfg.neg_cache, cfg.neg_per_image, index,
                                      positives=positives, pose_per_image=cfg.pose_negatives,
                                      pose_tol=cfg.pose_tol)
        negs = _merge_cache(cache, neg_new, cfg.neg_cache, state.w)
        _run_svm(state, pos + negs, cfg.epochs, rng,
                 lambda ep, obj: train_log.add("full", rnd, ep, obj, len(pos), len(negs)),
                 f"full round {rnd}")
    out = index.to_model(model, state.w)
    out.occlusion = model.occlusion
    return out


# ----------------------------------------------------------------------------------------
# occlusion parameters


def part_boxes(points: np.ndarray, names, size: float = layout.PART_BOX_SIZE) -> dict[str, Box]:
    return {n: Box.around(*points[layout.PART_INDEX[n]], size, size) for n in names}


def pair_ious(points: np.ndarray, a: str, b: str, size: float = layout.PART_BOX_SIZE) -> np.ndarray:
    """IoU of each part of sub-tree ``a`` with its counterpart in ``b``."""
    pa = layout.SUBTREES[layout.SUBTREE_INDEX[a]].part_names
    out = []
    for p in pa:
        q = corresponding_part(p, b)
        out.append(iou(Box.around(*points[layout.PART_INDEX[p]], size, size),
                       Box.around(*points[layout.PART_INDEX[q]], size, size)))
    return np.array(out)


def learn_occlusion_params(points_list, size: float = layout.PART_BOX_SIZE, max_lambda: float = 0.9,
                           low_pct: float = 5.0, high_pct: float = 95.0) -> OcclusionParams:
    """Bounds from percentiles of overlapping counterpart-part IoUs; lambda from overlap frequency."""
    params = OcclusionParams()
    names = [st.name for st in layout.SUBTREES]
    pts_list = [np.asarray(p, dtype=float) for p in points_list]
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            vals = []
            hits = 0
            for pts in pts_list:
                v = pair_ious(pts, a, b, size)
                v = v[v > 0]
                if v.size:
                    hits += 1
                    vals.extend(v.tolist())
            if not vals:
                params.set(a, b, 0.0, 0.0, 1.0)
                continue
            lo, hi = np.percentile(vals, [low_pct, high_pct])
            lam = min(max_lambda, hits / len(pts_list))
            params.set(a, b, lam, float(lo), float(hi))
    return params


# ----------------------------------------------------------------------------------------
# pipeline


def learn_model_structures(positives: list[Sample], cfg: TrainConfig):
    pts = np.array([s.points for s in positives])
    shapes = [s.pyramid.image_shape for s in positives]
    structures, assignments = {}, {}
    for st in layout.SUBTREES:
        desc = build_descriptors(pts, st, [s.pyramid.levels[0] for s in positives], shapes)
        structs, assign = learn_structures(desc, st, min(cfg.M, int(desc.valid.sum())), cfg.seed, cfg.features)
        structures[st.name] = structs
        assignments[st.name] = assign
    return structures, assignments


def train(positives: list[Sample], negatives: list[Sample], cfg: TrainConfig,
          train_log: TrainLog | None = None, jobs: int = 1) -> PoseModel:
    """Structure learning, per-sub-tree stage, full stage, then occlusion parameters."""
    if not positives:
        raise ValueError("training needs at least one positive image")
    if not negatives:
        raise ValueError("training needs negative (person-free) images for hard-negative mining")
    train_log = train_log if train_log is not None else TrainLog()
    structures, assignments = learn_model_structures(positives, cfg)
    pts = np.array([s.points for s in positives])
    torso = float(np.mean([layout.torso_height(p) for p in pts]))
    meta = {"interval": cfg.interval, "clip": cfg.clip, "max_levels": cfg.max_levels,
            "torso_cells": torso / cfg.cell_size, "threshold": cfg.threshold,
            "assignments": {k: v.tolist() for k, v in assignments.items()},
            "occlusion_config": {"threshold": cfg.occlusion_threshold, "overlap": cfg.occlusion_overlap,
                                 "limit": cfg.occlusion_limit},
            "config": cfg.to_text()}
    model = init_parameters(structures, assignments, pts, cfg.K_limb, cfg.K_other, cfg.seed, cfg.cell_size, meta)
    model = train_subtree_stage(model, positives, negatives, cfg, train_log, jobs)
    model = train_full_stage(model, positives, negatives, cfg, train_log, jobs)
    model.occlusion = learn_occlusion_params(pts)
    return model
