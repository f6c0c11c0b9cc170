"""Occlusion-aware re-scoring of sub-tree root maps.

Candidates come from NMS on each mixture's root evidence.  A candidate of
one sub-tree is compared with the candidates of its sibling sub-tree (same
upper-layer parent): corresponding parts are overlapped, overlaps outside the
learned range are gated to zero, and the lower-scoring side of a gated pair
receives the exclusion penalty  log(1 - lambda * mean gated IoU).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layout
from .geometry import Box, Candidate, ScoreMap, cell_box, iou, iou_matrix, map_candidates

LOG_FLOOR = 1e-6
DEFAULT_OVERLAP = 0.5
DEFAULT_LIMIT = 3


@dataclass
class OcclusionCandidate:
    sub_tree: str
    mixture: int
    root: Candidate
    parts: dict[str, Box]  # observed part name -> box
    owned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))  # flat cells it suppressed

    @property
    def score(self) -> float:
        return self.root.score

    @property
    def rank_key(self):
        # higher score first; equal scores by (level, y, x) then sub-tree and mixture
        return self.root.order_key + (self.sub_tree, self.mixture)


@dataclass
class OcclusionSet:
    sub_tree: str
    mixture: int
    candidates: list[OcclusionCandidate]


def _nms_with_owners(cands: list[Candidate], overlap: float, limit: int | None):
    """Greedy NMS that also reports, per kept candidate, the candidates it suppressed."""
    order = sorted(cands, key=lambda c: c.order_key)
    if not order:
        return []
    boxes = np.array([c.box.as_tuple() for c in order])
    alive = np.ones(len(order), dtype=bool)
    out = []
    for i, c in enumerate(order):
        if not alive[i]:
            continue
        alive[i] = False
        rest = np.nonzero(alive)[0]
        sup = rest[iou_matrix(boxes[i], boxes[rest])[0] > overlap] if rest.size else rest
        alive[sup] = False
        out.append((c, [order[j] for j in sup]))
        if limit is not None and len(out) >= limit:
            break
    return out


def build_occlusion_sets(st, result, scale: float, level: int = 0,
                         threshold: float = -np.inf, overlap: float = DEFAULT_OVERLAP,
                         limit: int | None = DEFAULT_LIMIT) -> list[OcclusionSet]:
    """NMS over each mixture's root map, each survivor backtracked to its part boxes.

    ``st`` is a SubTreeModel and ``result`` its SubTreeResult at one level.
    """
    from .inference import backtrack_mixture

    sets = []
    for m, mr in enumerate(result.mixtures):
        W = mr.root.shape[1]
        smap = ScoreMap(f"{st.name}/m{m}", level, mr.root[None], scale, st.extent)
        found = []
        for root, supp in _nms_with_owners(map_candidates(smap, threshold), overlap, limit):
            y, x = root.location
            placed = backtrack_mixture(st, m, mr, y, x)
            boxes = {}
            for node, (ny, nx, _) in placed.items():
                spec = st.mixtures[m].nodes[node]
                if not spec.latent:
                    boxes[node] = cell_box(ny, nx, scale, spec.extent)
            owned = np.array([y * W + x] + [c.location[0] * W + c.location[1] for c in supp], dtype=np.int64)
            found.append(OcclusionCandidate(st.name, m, root, boxes, owned))
        sets.append(OcclusionSet(st.name, m, found))
    return sets


def occlusion_gate(u, v, lower: float, upper: float) -> float:
    """IoU of the two boxes when it lies in [lower, upper], else 0."""
    bu = u.box if isinstance(u, Candidate) else u
    bv = v.box if isinstance(v, Candidate) else v
    theta = iou(bu, bv)
    return theta if lower <= theta <= upper else 0.0


def exclusion_value(gated, lam: float) -> float:
    """log(1 - lam * mean(gated)) with the argument floored; 0 for no samples."""
    g = np.asarray(gated, dtype=float)
    if g.size == 0 or lam == 0.0:
        return 0.0
    return float(np.log(max(LOG_FLOOR, 1.0 - lam * g.mean())))


def corresponding_part(name: str, other_sub_tree: str) -> str | None:
    """The part at the same chain position in ``other_sub_tree`` (knee_l -> knee_r, elbow_l -> knee_r)."""
    other = layout.SUBTREES[layout.SUBTREE_INDEX[other_sub_tree]].part_names
    for st in layout.SUBTREES:
        if name in st.part_names:
            return other[st.part_names.index(name)]
    return None


def gated_samples(u: OcclusionCandidate, others: list[OcclusionCandidate], lower: float, upper: float,
                  only_stronger: bool = True) -> tuple[np.ndarray, int]:
    """Gated IoUs between ``u``'s parts and their counterparts in ``others``.

    Returns (the gated values that apply to ``u``, S) where S counts every
    candidate part sample of the other sub-tree.  With ``only_stronger`` a
    pair contributes only when ``u`` is the lower-ranked candidate.
    """
    vals = []
    S = 0
    for v in others:
        S += len(v.parts)
        if only_stronger and not v.rank_key < u.rank_key:
            continue
        for name, box in u.parts.items():
            mate = corresponding_part(name, v.sub_tree)
            if mate is None or mate not in v.parts:
                continue
            g = occlusion_gate(box, v.parts[mate], lower, upper)
            if g > 0:
                vals.append(g)
    return np.array(vals), S


def exclusion_term(u: OcclusionCandidate, others: list[OcclusionCandidate], lam: float,
                   lower: float, upper: float, only_stronger: bool = True) -> float:
    """psi <= 0 for candidate ``u`` against the candidates of one competing sub-tree."""
    vals, S = gated_samples(u, others, lower, upper, only_stronger)
    if S == 0 or vals.size == 0:
        return 0.0
    return float(np.log(max(LOG_FLOOR, 1.0 - lam * vals.sum() / S)))


def sibling_pairs(parents: dict[str, str]) -> list[tuple[str, str]]:
    """Sub-tree pairs sharing an upper-layer parent, sorted."""
    names = sorted(parents)
    return [(a, b) for i, a in enumerate(names) for b in names[i + 1:] if parents[a] == parents[b]]


def candidate_penalties(sets: dict[str, list[OcclusionSet]], params, parents: dict[str, str],
                        only_stronger: bool = True) -> dict[tuple[str, int, int], float]:
    """Penalty per occluded candidate, keyed (sub_tree, mixture, index in its set).

    Penalties are computed from the frozen sets, so one pass is final.
    """
    flat = {n: [c for s in ss for c in s.candidates] for n, ss in sets.items()}
    out: dict[tuple[str, int, int], float] = {}
    for a, b in sibling_pairs(parents):
        lam, lower, upper = params.get(a, b)
        if lam <= 0.0:
            continue
        for me, other in ((a, b), (b, a)):
            for s in sets.get(me, []):
                for k, u in enumerate(s.candidates):
                    vals, S = gated_samples(u, flat.get(other, []), lower, upper, only_stronger)
                    if vals.size == 0 or S == 0:
                        continue
                    psi = float(np.log(max(LOG_FLOOR, 1.0 - lam * vals.sum() / S)))
                    key = (me, s.mixture, k)
                    # several competitors: keep the largest (least severe) psi
                    out[key] = max(out[key], psi) if key in out else psi
    return out


def reweight(maps: dict[tuple[str, int], np.ndarray], sets: dict[str, list[OcclusionSet]], params,
             parents: dict[str, str], only_stronger: bool = True) -> dict[tuple[str, int], np.ndarray]:
    """Add each occluded candidate's penalty to its cells of the (sub_tree, mixture) root map."""
    pens = candidate_penalties(sets, params, parents, only_stronger)
    out = {k: v.copy() for k, v in maps.items()}
    for (name, m, k), psi in pens.items():
        cand = next(s for s in sets[name] if s.mixture == m).candidates[k]
        grid = out[(name, m)]
        flat = grid.reshape(-1)
        flat[cand.owned] += psi
    return out


def penalty_maps(sets, params, parents, shape, only_stronger: bool = True) -> dict[tuple[str, int], np.ndarray]:
    """Additive penalty grids (zeros where nothing fires)."""
    zeros = {(s.sub_tree, s.mixture): np.zeros(shape) for ss in sets.values() for s in ss}
    return reweight(zeros, sets, params, parents, only_stronger)


def apply_occlusion(model, subs: dict, ctx, threshold: float = -np.inf, overlap: float = DEFAULT_OVERLAP,
                    limit: int | None = DEFAULT_LIMIT, only_stronger: bool = True) -> None:
    """Fill in the per-mixture penalties of every SubTreeResult and recombine."""
    parents = {n: st.parent for n, st in model.subtrees.items()}
    if not any(model.occlusion.get(a, b)[0] > 0 for a, b in sibling_pairs(parents)):
        return
    sets = {n: build_occlusion_sets(model.subtrees[n], res, ctx.scale, ctx.level, threshold, overlap, limit)
            for n, res in subs.items()}
    shape = (ctx.H, ctx.W)
    pens = penalty_maps(sets, model.occlusion, parents, shape, only_stronger)
    for n, res in subs.items():
        res.penalty = [pens.get((n, m)) for m in range(len(res.mixtures))]
        res.penalty = [p if p is not None and p.any() else None for p in res.penalty]
        res.combine()
