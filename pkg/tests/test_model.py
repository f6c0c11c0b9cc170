import numpy as np
import pytest

from mstpose import layout
from mstpose.model import ParamIndex, dt_coefficients, deformation_features, validate
from mstpose.structure import ROOT


def test_initialised_model_is_valid(init_model):
    assert validate(init_model) == []
    assert set(init_model.subtrees) == {st.name for st in layout.SUBTREES}
    assert init_model.upper_postorder()[-1] == "Root"
    for st in init_model.subtrees.values():
        assert st.z_norm == 4  # two mixtures here and two in the sibling
        for mx in st.mixtures:
            assert mx.nodes[ROOT].latent


def test_param_index_round_trip(init_model):
    index = ParamIndex(init_model)
    w = index.to_vector(init_model)
    assert w.size == index.size
    again = index.to_vector(index.to_model(init_model, w))
    assert np.array_equal(w, again)
    q = index.quadratic_positions()
    assert (w[q] > 0).all()
    blk = index[("upper", "head", "deformation")]
    assert blk.size == 4 * init_model.upper["head"].num_types


def test_compat_mask_skips_incompatible_pairs(init_model):
    model = init_model.copy()
    spec = model.upper["head"]
    spec.compat[0, 0] = -np.inf
    index = ParamIndex(model)
    assert index.compat_position(("upper", "head", "compat"), 0, 0) is None
    back = index.to_model(model, index.to_vector(model))
    assert back.upper["head"].compat[0, 0] == -np.inf


@pytest.mark.parametrize("mutate, message", [
    (lambda m: m.upper["head"].deformation.__setitem__((0, 0), -1.0), "negative quadratic"),
    (lambda m: m.upper["head"].compat.fill(-np.inf), "no compatible type pair"),
    (lambda m: m.occlusion.pairs.__setitem__(("left_leg", "right_leg"), (1.5, 0.0, 1.0)), "lambda"),
    (lambda m: setattr(m.subtrees["left_arm"], "parent", "nowhere"), "not in upper layer"),
    (lambda m: [setattr(mx, "gate", False) for mx in m.subtrees["left_leg"].mixtures], "gated off"),
])
def test_validate_reports_violations(init_model, mutate, message):
    model = init_model.copy()
    mutate(model)
    assert any(message in p for p in validate(model))


def test_effective_deformation_is_mixture_sum_over_z():
    from mstpose.model import MixtureModel, SubTreeModel

    mixes = [MixtureModel(None, {}, root_deformation=np.array([1.0, 0.0, 2.0, 0.0])),
             MixtureModel(None, {}, root_deformation=np.array([3.0, 1.0, 2.0, 1.0]))]
    st = SubTreeModel("left_arm", "U.Body", mixes, np.zeros(2, dtype=int), (3, 3), 4)
    np.testing.assert_allclose(st.effective_deformation(), [1.0, 0.25, 1.0, 0.25])


def test_deformation_units():
    # one displacement unit is four cells
    assert float(np.ones(4) @ deformation_features(4, 4)) == pytest.approx(-4.0)
    np.testing.assert_allclose(dt_coefficients([16, 4, 16, 4]), [1, 1, 1, 1])
