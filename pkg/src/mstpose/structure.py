"""Mixture discovery and sub-tree topology learning.

Samples of one limb are clustered into mixtures with K-means over
node-to-root appearance and geometric distances.  Each mixture's topology is
then a Chow-Liu tree over correlation distances, regrouped so that tight
sibling groups hang from latent nodes below the mixture root ``v0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .features import FeatureMap, feature_patch
from .layout import CANONICAL_TORSO, SubTreeDefinition, torso_height

log = logging.getLogger(__name__)

RHO_EPS = 1e-6
ROOT = "v0"


@dataclass
class MixtureStructure:
    """Tree over a mixture's observed parts and latent grouping nodes, rooted at ``v0``."""

    sub_tree: str
    mixture_id: int
    parent: dict[str, str | None]
    observed: tuple[str, ...]
    members: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def nodes(self) -> list[str]:
        return list(self.parent)

    @property
    def latent(self) -> list[str]:
        return [n for n in self.parent if n not in self.observed]

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(c, p) for c, p in self.parent.items() if p is not None]

    def children(self, node: str) -> list[str]:
        return [c for c, p in self.parent.items() if p == node]

    def postorder(self) -> list[str]:
        """Children before parents, deterministic."""
        out: list[str] = []

        def visit(n):
            for c in self.children(n):
                visit(c)
            out.append(n)

        visit(ROOT)
        return out

    def observed_below(self, node: str) -> tuple[str, ...]:
        if node in self.observed:
            return (node,)
        res: list[str] = []
        for c in self.children(node):
            res.extend(self.observed_below(c))
        return tuple(res)

    def check(self) -> list[str]:
        problems = []
        roots = [n for n, p in self.parent.items() if p is None]
        if roots != [ROOT]:
            problems.append(f"expected single root {ROOT}, got {roots}")
        if len(self.edges) != len(self.parent) - 1:
            problems.append("edge count != node count - 1")
        for n in self.parent:
            seen = set()
            cur: str | None = n
            while cur is not None:
                if cur in seen or cur not in self.parent:
                    problems.append(f"node {n} does not reach {ROOT}")
                    break
                seen.add(cur)
                cur = self.parent[cur]
        for n in self.latent:
            if not self.children(n):
                problems.append(f"latent node {n} has no children")
        missing = set(self.observed) - set(self.parent)
        if missing:
            problems.append(f"observed parts missing: {sorted(missing)}")
        return problems

    def to_dict(self) -> dict:
        return {"sub_tree": self.sub_tree, "mixture_id": self.mixture_id,
                "parent": dict(self.parent), "observed": list(self.observed)}

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureStructure":
        return cls(d["sub_tree"], int(d["mixture_id"]), dict(d["parent"]), tuple(d["observed"]))


def star_structure(sub_tree: str, mixture_id: int, parts) -> MixtureStructure:
    parent: dict[str, str | None] = {ROOT: None}
    for p in parts:
        parent[p] = ROOT
    return MixtureStructure(sub_tree, mixture_id, parent, tuple(parts))


def root_location(points: np.ndarray, st: SubTreeDefinition) -> np.ndarray:
    """Centroid of the sub-tree's parts; ``points`` is (26, 2) in (x, y)."""
    pts = np.asarray(points, dtype=float)
    return pts[list(st.part_ids)].mean(axis=0)


def correlation_distance(v_i, v_0, eps: float = RHO_EPS) -> float:
    """-log of the product-moment correlation, clamped to [eps, 1]."""
    x = np.asarray(v_i, dtype=float)
    y = np.asarray(v_0, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"vectors must be 1-D and equal length, got {x.shape} vs {y.shape}")
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    cov = n * np.dot(x, y) - x.sum() * y.sum()
    var_x = n * np.dot(x, x) - x.sum() ** 2
    var_y = n * np.dot(y, y) - y.sum() ** 2
    if var_x <= 1e-12 * n * np.dot(x, x) or var_y <= 1e-12 * n * np.dot(y, y):
        rho = eps
    else:
        rho = float(np.clip(cov / np.sqrt(var_x * var_y), eps, 1.0))
    return max(0.0, -float(np.log(rho)))


@dataclass
class SubTreeDescriptors:
    """Per-sample node-to-root distances: appearance block then geometry block."""

    raw: np.ndarray  # (n, 2p)
    valid: np.ndarray  # (n,) bool
    standardized: np.ndarray  # (n, 2p)


def _standardize(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    out = np.zeros_like(x)
    np.divide(x - mu, sd, out=out, where=sd > 1e-12)
    return out


def build_descriptors(points, st: SubTreeDefinition, feature_maps: list[FeatureMap],
                      image_shapes=None, patch: int = 3) -> SubTreeDescriptors:
    """Appearance and scale-normalised geometric distances of each part to the sub-tree root.

    ``points`` is (n, 26, 2).  Appearance distance is the Euclidean distance
    between the HOG patches at the part and at the root location.
    """
    pts = np.asarray(points, dtype=float)
    n, p = len(pts), len(st.part_ids)
    raw = np.zeros((n, 2 * p))
    valid = np.ones(n, dtype=bool)
    for s in range(n):
        fm = feature_maps[s]
        root = root_location(pts[s], st)
        norm = CANONICAL_TORSO / max(torso_height(pts[s]), 1e-9)
        if image_shapes is not None:
            H, W = image_shapes[s]
            part_xy = pts[s][list(st.part_ids)]
            if (part_xy < 0).any() or (part_xy[:, 0] >= W).any() or (part_xy[:, 1] >= H).any():
                valid[s] = False
                continue
        ry, rx = (root[::-1] / fm.scale).astype(int)
        root_patch = feature_patch(fm.data, ry, rx, patch, patch).ravel()
        for j, pid in enumerate(st.part_ids):
            px, py = pts[s, pid]
            part_patch = feature_patch(fm.data, int(py / fm.scale), int(px / fm.scale), patch, patch).ravel()
            raw[s, j] = np.linalg.norm(part_patch - root_patch)
            raw[s, p + j] = np.hypot(px - root[0], py - root[1]) * norm
    std = np.zeros_like(raw)
    if valid.any():
        std[valid] = _standardize(raw[valid])
    return SubTreeDescriptors(raw, valid, std)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
    return np.asarray(centers, dtype=float)


def cluster_mixtures(descriptors, M: int, seed: int = 0, max_iter: int = 300,
                     return_trace: bool = False):
    """K-means (k-means++ seeding) assignments in 0..M-1."""
    x = np.asarray(descriptors, dtype=float)
    if M < 1:
        raise ValueError("M must be >= 1")
    if M > len(x):
        raise ValueError(f"cannot form {M} mixtures from {len(x)} samples")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, M, rng)
    trace = []
    assign = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(len(x)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(M):
            members = x[assign == k]
            if len(members):
                centers[k] = members.mean(axis=0)
        trace.append(float(((x - centers[assign]) ** 2).sum()))
    assign = _canonical_labels(assign, M)
    return (assign, trace) if return_trace else assign


def _canonical_labels(assign: np.ndarray, M: int) -> np.ndarray:
    """Relabel clusters by first occurrence so labels are stable."""
    mapping: dict[int, int] = {}
    for a in assign:
        if int(a) not in mapping:
            mapping[int(a)] = len(mapping)
    for k in range(M):
        mapping.setdefault(k, len(mapping))
    return np.array([mapping[int(a)] for a in assign], dtype=int)


def chow_liu_tree(d) -> list[tuple[int, int]]:
    """Minimum spanning tree under distances d (max total of -d); ties by (i, j)."""
    d = np.asarray(d, dtype=float)
    n = d.shape[0]
    if d.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if not np.allclose(d, d.T, rtol=0, atol=1e-12):
        raise ValueError("distance matrix is not symmetric")
    cand = sorted((d[i, j], i, j) for i in range(n) for j in range(i + 1, n))
    root = list(range(n))

    def find(a):
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    edges = []
    for _, i, j in cand:
        ri, rj = find(i), find(j)
        if ri != rj:
            root[max(ri, rj)] = min(ri, rj)
            edges.append((i, j))
            if len(edges) == n - 1:
                break
    return sorted(edges)


def _sibling_groups(d: np.ndarray, threshold: float) -> list[list[int]]:
    n = len(d)
    if n < 3:
        return []
    edges = chow_liu_tree(d)
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    groups = []
    for u in range(n):
        if len(nbrs[u]) < 2:
            continue
        members = [u]
        for leaf in sorted(v for v in nbrs[u] if len(nbrs[v]) == 1):
            if all(d[leaf, m] < threshold for m in members):
                members.append(leaf)
        if len(members) >= 2:
            groups.append(sorted(members))
    return groups


def cl_group(parts, d, sub_tree: str = "", mixture_id: int = 0, depth: int = 2) -> MixtureStructure:
    """Chow-Liu grouping: latent nodes for tight sibling groups, all top-level items under v0.

    A sibling group is an internal node of the Chow-Liu tree together with its
    leaf neighbours; it is kept when all its internal distances fall below the
    median pairwise distance.  Grouping is re-applied to the resulting items
    (average-linkage distances) up to ``depth`` rounds.
    """
    parts = list(parts)
    d = np.asarray(d, dtype=float)
    if len(parts) != len(d):
        raise ValueError("parts and distance matrix size differ")
    iu = np.triu_indices(len(parts), 1)
    threshold = float(np.median(d[iu])) if len(iu[0]) else 0.0

    items: list[tuple[str, tuple[int, ...]]] = [(p, (i,)) for i, p in enumerate(parts)]
    parent: dict[str, str | None] = {ROOT: None}
    n_latent = 0
    for _ in range(depth):
        k = len(items)
        dm = np.zeros((k, k))
        for a in range(k):
            for b in range(a + 1, k):
                dm[a, b] = dm[b, a] = d[np.ix_(items[a][1], items[b][1])].mean()
        groups = _sibling_groups(dm, threshold)
        if not groups:
            break
        grouped = set()
        new_items = []
        for g in groups:
            name = f"g{n_latent}"
            n_latent += 1
            for idx in g:
                parent[items[idx][0]] = name
                grouped.add(idx)
            new_items.append((name, tuple(sorted(sum((items[idx][1] for idx in g), ())))))
        rest = [items[i] for i in range(k) if i not in grouped]
        items = sorted(rest + new_items, key=lambda it: it[1])
    for name, _ in items:
        parent[name] = ROOT
    # stable ordering: root first, then latent nodes, then parts
    ordered = {ROOT: None}
    for n in sorted((n for n in parent if n.startswith("g")), key=lambda s: int(s[1:])):
        ordered[n] = parent[n]
    for p in parts:
        ordered[p] = parent[p]
    return MixtureStructure(sub_tree, mixture_id, ordered, tuple(parts))


def part_series(desc: np.ndarray, n_parts: int, features: str = "both") -> np.ndarray:
    """Per-part feature series (rows) from a cluster's descriptor rows."""
    z = _standardize(desc)
    app, geo = z[:, :n_parts].T, z[:, n_parts:].T
    if features == "appearance":
        return app
    if features == "geometry":
        return geo
    return np.concatenate([app, geo], axis=1)


def distance_matrix(series: np.ndarray) -> np.ndarray:
    n = len(series)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = correlation_distance(series[i], series[j])
    return d


def learn_structures(descriptors, st: SubTreeDefinition, M: int, seed: int = 0,
                     features: str = "both", valid=None):
    """Cluster samples into M mixtures and learn one topology per mixture.

    Returns (structures, assignments); samples flagged invalid are assigned to
    the nearest cluster centre afterwards.
    """
    if isinstance(descriptors, SubTreeDescriptors):
        if valid is None:
            valid = descriptors.valid
        descriptors = descriptors.standardized
    x = np.asarray(descriptors, dtype=float)
    valid = np.ones(len(x), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    xv = x[valid]
    assign_v = cluster_mixtures(xv, M, seed)
    assign = np.zeros(len(x), dtype=int)
    assign[valid] = assign_v
    if (~valid).any():
        centers = np.array([xv[assign_v == k].mean(axis=0) if (assign_v == k).any() else xv.mean(axis=0)
                            for k in range(M)])
        d2 = ((x[~valid][:, None] - centers[None]) ** 2).sum(-1)
        assign[~valid] = np.argmin(d2, axis=1)
    n_parts = len(st.part_ids)
    structures = []
    for m in range(M):
        rows = xv[assign_v == m]
        if len(rows) < 2:
            log.info("%s mixture %d has %d samples; using a star", st.name, m, len(rows))
            structures.append(star_structure(st.name, m, st.part_names))
            continue
        d = distance_matrix(part_series(rows, n_parts, features))
        structures.append(cl_group(st.part_names, d, st.name, m))
    return structures, assign
