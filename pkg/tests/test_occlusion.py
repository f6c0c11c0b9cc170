import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mstpose.geometry import Box, Candidate
from mstpose.model import OcclusionParams
from mstpose.occlusion import (OcclusionCandidate, OcclusionSet, candidate_penalties, corresponding_part,
                               exclusion_term, exclusion_value, gated_samples, occlusion_gate, reweight,
                               sibling_pairs)

PARENTS = {"left_arm": "U.Body", "right_arm": "U.Body", "left_leg": "L.Body", "right_leg": "L.Body"}


def cand(sub, score, parts, loc=(0, 0), owned=(0,)):
    root = Candidate(sub, loc, 0, 0, score, Box(0, 0, 1, 1))
    return OcclusionCandidate(sub, 0, root, parts, np.array(owned, dtype=np.int64))


@given(st.lists(st.floats(0, 1), max_size=12), st.floats(0, 0.999))
def test_exclusion_never_positive(vals, lam):
    assert exclusion_value(vals, lam) <= 0.0


def test_exclusion_direct_value():
    assert exclusion_value([0.5, 0.5], 0.5) == pytest.approx(math.log(0.75), abs=1e-12)
    assert exclusion_value([0.2, 0.8], 0.5) == pytest.approx(math.log(0.75), abs=1e-12)
    assert exclusion_value([], 0.5) == 0.0
    assert exclusion_value([0.7], 0.0) == 0.0
    # the log argument is floored, never -inf
    assert exclusion_value([1.0], 1.0) == pytest.approx(math.log(1e-6))


def test_gate_window():
    a, b = Box(0, 0, 2, 2), Box(1, 0, 3, 2)  # IoU 1/3
    assert occlusion_gate(a, b, 0.2, 0.5) == pytest.approx(1 / 3)
    assert occlusion_gate(a, b, 0.4, 0.5) == 0.0
    assert occlusion_gate(a, b, 0.0, 0.3) == 0.0


def test_corresponding_part_by_chain_position():
    assert corresponding_part("knee_l", "right_leg") == "knee_r"
    assert corresponding_part("elbow_l", "right_leg") == "knee_r"
    assert corresponding_part("hand_r", "left_arm") == "hand_l"
    assert corresponding_part("head", "left_arm") is None


def test_sibling_pairs():
    assert sibling_pairs(PARENTS) == [("left_arm", "right_arm"), ("left_leg", "right_leg")]


def test_only_weaker_candidate_is_penalised():
    box = Box(0, 0, 10, 10)
    half = Box(0, 0, 10, 5)  # IoU with box = 0.5
    strong = cand("left_leg", 5.0, {"knee_l": box, "ankle_l": Box(50, 50, 60, 60)})
    weak = cand("right_leg", 1.0, {"knee_r": half, "ankle_r": Box(90, 90, 95, 95)})
    vals, S = gated_samples(weak, [strong], 0.1, 0.9)
    assert vals.tolist() == [0.5] and S == 2
    assert exclusion_term(weak, [strong], 0.5, 0.1, 0.9) == pytest.approx(math.log(1 - 0.5 * 0.5 / 2))
    assert exclusion_term(strong, [weak], 0.5, 0.1, 0.9) == 0.0
    assert exclusion_term(strong, [weak], 0.5, 0.1, 0.9, only_stronger=False) < 0.0


def test_mean_gated_half_with_half_lambda_gives_log_three_quarters():
    # every counterpart pair overlaps at IoU 0.5, so the mean gated IoU over S samples is 0.5
    box, half = Box(0, 0, 10, 10), Box(0, 0, 10, 5)
    strong = cand("left_leg", 5.0, {"knee_l": box, "ankle_l": box})
    weak = cand("right_leg", 1.0, {"knee_r": half, "ankle_r": half})
    assert exclusion_term(weak, [strong], 0.5, 0.0, 1.0) == pytest.approx(math.log(0.75), abs=1e-12)


def test_penalty_lands_on_owned_cells_of_weaker_sub_tree():
    box, half = Box(0, 0, 10, 10), Box(0, 0, 10, 5)
    sets = {"left_leg": [OcclusionSet("left_leg", 0, [cand("left_leg", 5.0, {"knee_l": box}, owned=(0, 1))])],
            "right_leg": [OcclusionSet("right_leg", 0, [cand("right_leg", 1.0, {"knee_r": half}, owned=(4, 5))])]}
    params = OcclusionParams()
    params.set("left_leg", "right_leg", 0.5, 0.1, 0.9)
    pens = candidate_penalties(sets, params, PARENTS)
    assert list(pens) == [("right_leg", 0, 0)]
    maps = {("left_leg", 0): np.zeros((3, 3)), ("right_leg", 0): np.zeros((3, 3))}
    out = reweight(maps, sets, params, PARENTS)
    assert not out[("left_leg", 0)].any()
    expected = np.zeros(9)
    expected[[4, 5]] = math.log(0.75)
    np.testing.assert_allclose(out[("right_leg", 0)].ravel(), expected)
    assert not maps[("right_leg", 0)].any()  # inputs untouched
    params.set("left_leg", "right_leg", 0.0, 0.1, 0.9)
    assert candidate_penalties(sets, params, PARENTS) == {}


def test_non_sibling_pairs_are_ignored():
    box = Box(0, 0, 10, 10)
    sets = {"left_arm": [OcclusionSet("left_arm", 0, [cand("left_arm", 5.0, {"elbow_l": box})])],
            "left_leg": [OcclusionSet("left_leg", 0, [cand("left_leg", 1.0, {"knee_l": box})])]}
    params = OcclusionParams()
    params.set("left_arm", "left_leg", 0.9, 0.0, 1.0)
    assert candidate_penalties(sets, params, PARENTS) == {}


def test_occlusion_toggle_changes_only_gated_cells(init_model):
    from mstpose.inference import infer_level, pyramid_for
    from mstpose.synth import SceneSpec, generate

    scene = SceneSpec(seed=12, occlusion_mode="legs_crossed", occlusion_rate=1.0)
    fired = 0
    for s in generate(4, scene):
        fmap = pyramid_for(init_model, s.image).levels[0]
        on = infer_level(init_model, fmap, occlusion=True)
        off = infer_level(init_model, fmap, occlusion=False)
        for name in init_model.subtrees:
            a, b = on.subtrees[name], off.subtrees[name]
            gated = np.zeros(a.score.shape, dtype=bool)
            for p in a.penalty:
                if p is not None:
                    gated |= p != 0
            fired += int(gated.sum())
            assert (a.score <= b.score).all()
            np.testing.assert_array_equal(a.score[~gated], b.score[~gated])
    assert fired > 0


def test_zero_lambda_model_is_unchanged(init_model):
    from mstpose.inference import detect
    from mstpose.synth import SceneSpec, generate

    model = init_model.copy()
    for key in list(model.occlusion.pairs):
        model.occlusion.set(*key, 0.0, 0.0, 1.0)
    for s in generate(2, SceneSpec(seed=13, occlusion_mode="legs_crossed", occlusion_rate=1.0)):
        a = detect(model, s.image, occlusion=True, max_detections=3)
        b = detect(model, s.image, occlusion=False, max_detections=3)
        assert [e.score for e in a] == [e.score for e in b]
        assert [e.points().tobytes() for e in a] == [e.points().tobytes() for e in b]
