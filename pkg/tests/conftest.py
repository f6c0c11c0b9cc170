import numpy as np
import pytest

from mstpose.config import TrainConfig
from mstpose.model import ParamIndex, init_parameters
from mstpose.synth import SceneSpec, generate
from mstpose.training import Sample, learn_model_structures, make_pyramid


@pytest.fixture(scope="session")
def init_model():
    """Initialised (untrained) model from eight synthetic poses, with random weights."""
    cfg = TrainConfig(M=2, K_limb=2, K_other=2, max_levels=1)
    data = list(generate(8, SceneSpec(seed=9)))
    pos = [Sample(make_pyramid(s.image, cfg), s.pose.points) for s in data]
    structures, assign = learn_model_structures(pos, cfg)
    pts = np.array([s.points for s in pos])
    model = init_parameters(structures, assign, pts, cfg.K_limb, cfg.K_other, 0, cfg.cell_size,
                            {"config": cfg.to_text(), "max_levels": 1})
    index = ParamIndex(model)
    rng = np.random.default_rng(0)
    w = index.to_vector(model) + rng.normal(0, 0.05, index.size)
    q = index.quadratic_positions()
    w[q] = np.abs(w[q]) + 0.05
    model = index.to_model(model, w)
    model.occlusion.set("left_leg", "right_leg", 0.6, 0.05, 0.7)
    model.occlusion.set("left_arm", "right_arm", 0.3, 0.1, 0.5)
    return model


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
