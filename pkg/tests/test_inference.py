import numpy as np
import pytest

from mstpose.features import FeatureMap, FeaturePyramid
from mstpose.inference import (backtrack, configuration_features, infer, infer_level, part_scores, pass_message,
                               rescore, LevelContext)
from mstpose.model import ParamIndex, PartSpec, dt_coefficients, deformation_features

from tiny import DIM, brute_force_best, configuration_score, random_tiny_model


def _best(model, fmap):
    lr = infer_level(model, fmap)
    y, x = np.unravel_index(np.argmax(lr.root), lr.root.shape)
    return lr, backtrack(model, lr, int(y), int(x))


def test_map_score_matches_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(20):
        model, fmap = random_tiny_model(rng)
        lr, est = _best(model, fmap)
        assert lr.root.max() == pytest.approx(brute_force_best(model, fmap.data), abs=1e-9)
        assert configuration_score(model, fmap.data, est) == pytest.approx(est.score, abs=1e-9)


def test_rescore_and_features_reproduce_dp_score():
    rng = np.random.default_rng(12)
    for _ in range(10):
        model, fmap = random_tiny_model(rng)
        _, est = _best(model, fmap)
        pyr = FeaturePyramid((fmap,), 1, 4, (fmap.rows * 4, fmap.cols * 4))
        assert rescore(model, pyr, est) == pytest.approx(est.score, abs=1e-9)
        index = ParamIndex(model)
        pos, val = configuration_features(model, index, LevelContext(fmap), est)
        assert float(index.to_vector(model)[pos] @ val) == pytest.approx(est.score, abs=1e-9)


def test_part_scores_are_template_responses():
    rng = np.random.default_rng(13)
    model, fmap = random_tiny_model(rng)
    _, est = _best(model, fmap)
    pyr = FeaturePyramid((fmap,), 1, 4, (fmap.rows * 4, fmap.cols * 4))
    scores = part_scores(model, pyr, est)
    assert set(scores) == set(est.parts)
    ctx = LevelContext(fmap)
    for name, v in scores.items():
        p = est.parts[name]
        spec = model.upper[name] if name in model.upper else next(
            mx.nodes[name] for st in model.subtrees.values() for m, mx in enumerate(st.mixtures)
            if est.mixtures.get(st.name) == m and name in mx.nodes)
        assert v == pytest.approx(ctx.unary(spec)[p.type_id, p.y, p.x])


def test_pass_message_respects_incompatible_types():
    child = np.zeros((2, 3, 3))
    child[0] += 5.0
    spec = PartSpec("c", "p", np.zeros((2, 1, 1, DIM)), np.zeros(2), np.zeros((2, 2), dtype=int),
                    np.ones((2, 4)) * [1, 0, 1, 0], np.array([[-np.inf, 0.0], [0.0, -np.inf]]))
    msg = pass_message(child, spec)
    assert (msg.argtype[0] == 1).all() and (msg.argtype[1] == 0).all()
    assert msg.value[1].max() == 5.0 and msg.value[0].max() == 0.0


def test_deformation_helpers_agree():
    w = np.array([0.3, -0.2, 0.5, 0.1])
    for dy, dx in [(0, 0), (2, -3), (-1, 4)]:
        c = dt_coefficients(w)
        assert float(w @ deformation_features(dy, dx)) == pytest.approx(
            -(c[0] * dx * dx + c[1] * dx + c[2] * dy * dy + c[3] * dy))


def test_translation_moves_estimate_by_one_cell():
    rng = np.random.default_rng(14)
    model, _ = random_tiny_model(rng)
    for spec in model.upper.values():
        spec.anchors[:] = 0
        spec.deformation[:, 0] = spec.deformation[:, 2] = 60.0
    for st in model.subtrees.values():
        st.anchor[:] = 0
        for mx in st.mixtures:
            mx.root_deformation[[0, 2]] = 60.0
            for spec in mx.nodes.values():
                spec.anchors[:] = 0
                spec.deformation[:, 0] = spec.deformation[:, 2] = 60.0
    data = np.zeros((16, 16, DIM))
    data[5:10, 5:10] = rng.normal(0, 1, (5, 5, DIM))
    shifted = np.zeros_like(data)
    shifted[6:11, 6:11] = data[5:10, 5:10]
    a = infer_level(model, FeatureMap(data, 4.0))
    b = infer_level(model, FeatureMap(shifted, 4.0))
    np.testing.assert_allclose(b.root[4:12, 4:12], a.root[3:11, 3:11], atol=1e-9)


def test_infer_returns_nms_detections_with_boxes():
    rng = np.random.default_rng(15)
    model, fmap = random_tiny_model(rng)
    pyr = FeaturePyramid((fmap,), 1, 4, (fmap.rows * 4, fmap.cols * 4))
    ests = infer(model, pyr, detection_threshold=-np.inf, max_detections=3)
    assert 1 <= len(ests) <= 3
    assert [e.score for e in ests] == sorted((e.score for e in ests), reverse=True)
    for e in ests:
        for name, p in e.parts.items():
            assert p.box.center == ((p.x + 0.5) * 4.0, (p.y + 0.5) * 4.0)
    assert infer(model, pyr, detection_threshold=np.inf) == []
