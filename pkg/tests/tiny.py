"""Random tiny models and an exhaustive scorer used as the inference oracle."""

from __future__ import annotations

import itertools

import numpy as np

from mstpose.features import FeatureMap
from mstpose.model import MixtureModel, OcclusionParams, PartSpec, PoseModel, SubTreeModel, latent_spec
from mstpose.structure import ROOT, MixtureStructure

DIM = 2
UNIT = 4.0  # cells per displacement unit of the stored deformation weights
ARM_PARTS = {"left_arm": ("uarm_l", "elbow_l", "larm_l"), "right_arm": ("uarm_r", "elbow_r", "larm_r")}
MAX_JOINT = 3_000_000


def _deform(rng, K):
    d = np.empty((K, 4))
    d[:, 0] = rng.uniform(0.05, 3.0, K)
    d[:, 2] = rng.uniform(0.05, 3.0, K)
    d[:, 1] = rng.uniform(-1.0, 1.0, K)
    d[:, 3] = rng.uniform(-1.0, 1.0, K)
    return d


def _compat(rng, K, Kp):
    c = rng.normal(0, 1, (K, Kp))
    c[rng.random((K, Kp)) < 0.25] = -np.inf
    for kp in range(Kp):
        if not np.isfinite(c[:, kp]).any():
            c[rng.integers(K), kp] = rng.normal()
    return c


def _observed(rng, name, parent, Kp):
    K = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(1, 4, 2))
    return PartSpec(name, parent, rng.normal(0, 1, (K, h, w, DIM)), rng.normal(0, 1, K),
                    rng.integers(-1, 2, (K, 2)), _deform(rng, K), _compat(rng, K, Kp), (h, w))


def _latent(rng, name, parent, Kp):
    spec = latent_spec(name, parent, Kp, tuple(rng.integers(-1, 2, 2)), (1, 1), DIM)
    spec.deformation = _deform(rng, 1)
    spec.compat = _compat(rng, 1, Kp)
    return spec


def _mixture(rng, sub, m, n_parts):
    parts = ARM_PARTS[sub][:n_parts]
    use_group = n_parts >= 2 and rng.random() < 0.5
    parent: dict[str, str | None] = {ROOT: None}
    nodes = {ROOT: latent_spec(ROOT, None, 1, (0, 0), (1, 1), DIM)}
    if use_group:
        parent["g0"] = ROOT
        nodes["g0"] = _latent(rng, "g0", ROOT, 1)
    for i, p in enumerate(parts):
        choices = [ROOT] + (["g0"] if use_group else []) + list(parts[:i])
        if use_group and i == 0:
            choices = ["g0"]  # the grouping node needs a child
        par = choices[int(rng.integers(len(choices)))]
        parent[p] = par
        nodes[p] = _observed(rng, p, par, nodes[par].num_types)
    return MixtureModel(MixtureStructure(sub, m, parent, tuple(parts)), nodes, rng.normal(0, 1, 1),
                        np.abs(_deform(rng, 1)[0]), bool(rng.random() < 0.85))


def random_tiny_model(rng):
    """A model with at most 6 observed parts, 2 types, 2 mixtures and a grid up to 6x6.

    Sizes are redrawn until the joint state space is small enough to enumerate.
    """
    while True:
        H, W = (int(v) for v in rng.integers(2, 7, 2))
        upper = {"Root": latent_spec("Root", None, 1, (0, 0), (1, 1), DIM)}
        if rng.random() < 0.7:
            upper["neck"] = _observed(rng, "neck", "Root", 1)
        subs = {}
        names = ["left_arm"] + (["right_arm"] if rng.random() < 0.4 else [])
        mcount = {n: int(rng.integers(1, 3)) for n in names}
        for n in names:
            mixes = [_mixture(rng, n, m, int(rng.integers(1, 4))) for m in range(mcount[n])]
            if not any(mx.gate for mx in mixes):
                mixes[0].gate = True
            subs[n] = SubTreeModel(n, "Root", mixes, rng.integers(-1, 2, 2), (1, 1), sum(mcount.values()))
        model = PoseModel(upper, subs, OcclusionParams(), {"feature_dim": DIM})
        n_obs = len(upper) - 1 + max(sum(len(mx.structure.observed) for mx in st.mixtures) for st in subs.values())
        if n_obs <= 6 and worst_joint_size(model, H * W) <= MAX_JOINT:
            fmap = FeatureMap(rng.normal(0, 1, (H, W, DIM)), 4.0, 0)
            return model, fmap


# ----------------------------------------------------------------------------------------
# exhaustive scoring


def unary(spec: PartSpec, data: np.ndarray) -> np.ndarray:
    """Template response at every cell by explicit summation, zero outside the map."""
    H, W, _ = data.shape
    if spec.latent:
        return np.zeros((1, H, W))
    K, h, w, _ = spec.templates.shape
    out = np.zeros((K, H, W))
    for k in range(K):
        for y in range(H):
            for x in range(W):
                s = spec.biases[k]
                for dy in range(h):
                    for dx in range(w):
                        yy, xx = y - h // 2 + dy, x - w // 2 + dx
                        if 0 <= yy < H and 0 <= xx < W:
                            s += spec.templates[k, dy, dx] @ data[yy, xx]
                out[k, y, x] = s
    return out


def pair_table(deformation, anchors, compat, H, W) -> np.ndarray:
    """Edge score [child state, parent state]; states enumerate (type, y, x)."""
    K, Kp = compat.shape
    ys, xs = np.divmod(np.arange(H * W), W)
    out = np.empty((K, H * W, Kp, H * W))
    for k in range(K):
        a = np.asarray(deformation[k], dtype=float)
        dy = ys[:, None] - ys[None, :] - anchors[k][0]
        dx = xs[:, None] - xs[None, :] - anchors[k][1]
        cost = (a[0] * dx ** 2 / UNIT ** 2 + a[1] * dx / UNIT + a[2] * dy ** 2 / UNIT ** 2 + a[3] * dy / UNIT)
        for kp in range(Kp):
            out[k, :, kp, :] = compat[k, kp] - cost
    return out.reshape(K * H * W, Kp * H * W)


def _tree_nodes(model: PoseModel, choice: dict[str, int]):
    """(key, parent key, spec-or-None, edge) for every node of the model under a mixture choice."""
    nodes = []
    for n, spec in model.upper.items():
        nodes.append((n, spec.parent, spec, None))
    for name, st in model.subtrees.items():
        eff = sum(mx.root_deformation for mx in st.mixtures) / st.z_norm
        Kp = model.upper[st.parent].num_types
        edge = (eff[None], np.array([st.anchor]), np.zeros((1, Kp)))
        nodes.append((name, st.parent, None, edge))
        mix = st.mixtures[choice[name]]
        for node, spec in mix.nodes.items():
            if node == ROOT:
                continue
            par = name if spec.parent == ROOT else f"{name}/{spec.parent}"
            nodes.append((f"{name}/{node}", par, spec, None))
    return nodes


def worst_joint_size(model: PoseModel, cells: int) -> int:
    worst = 0
    for choice in _choices(model):
        size = 1
        for _, _, spec, _ in _tree_nodes(model, choice):
            size *= (spec.num_types if spec is not None else 1) * cells
        worst = max(worst, size)
    return worst


def _choices(model: PoseModel):
    names = list(model.subtrees)
    for combo in itertools.product(*[range(model.subtrees[n].M) for n in names]):
        yield dict(zip(names, combo))


def joint_scores(model: PoseModel, data: np.ndarray, choice: dict[str, int]):
    """Score of every joint configuration for one mixture choice, plus the node keys in axis order."""
    H, W, _ = data.shape
    nodes = _tree_nodes(model, choice)
    keys = [k for k, _, _, _ in nodes]
    axis = {k: i for i, k in enumerate(keys)}
    sizes = [(spec.num_types if spec is not None else 1) * H * W for _, _, spec, _ in nodes]
    total = np.zeros(sizes)
    for k, par, spec, edge in nodes:
        shape = [1] * len(keys)
        if spec is not None:
            shape[axis[k]] = sizes[axis[k]]
            total += unary(spec, data).reshape(shape)
        if par is None:
            continue
        if edge is None:
            edge = (spec.deformation, spec.anchors, spec.compat)
        tab = pair_table(*edge, H, W)
        shape = [1] * len(keys)
        i, j = axis[k], axis[par]
        shape[i], shape[j] = tab.shape[0], tab.shape[1]
        total += (tab if i < j else tab.T).reshape(shape)
    for name, m in choice.items():
        mix = model.subtrees[name].mixtures[m]
        total += float(mix.bias[0]) if mix.gate else -np.inf
    return total, keys


def brute_force_best(model: PoseModel, data: np.ndarray) -> float:
    return max(float(joint_scores(model, data, c)[0].max()) for c in _choices(model))


def configuration_score(model: PoseModel, data: np.ndarray, est) -> float:
    """Exhaustive-table score of a backtracked estimate."""
    H, W, _ = data.shape
    total, keys = joint_scores(model, data, est.mixtures)
    idx = []
    for k in keys:
        if "/" in k:
            sub, node = k.split("/", 1)
            if node in est.parts:
                p = est.parts[node]
                y, x, t = p.y, p.x, p.type_id
            else:
                y, x, t = est.latent[k]
        elif k in est.parts:
            p = est.parts[k]
            y, x, t = p.y, p.x, p.type_id
        else:
            y, x, t = est.latent[k]
        idx.append(t * H * W + y * W + x)
    return float(total[tuple(idx)])
