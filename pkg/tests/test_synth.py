import numpy as np
import pytest

from mstpose import layout
from mstpose.evaluation import load_manifest
from mstpose.synth import FigureSpec, SceneSpec, generate, sample_pose, sample_stream, write_dataset


@pytest.mark.parametrize("mode", ["legs_crossed", "arm_over_torso", "mixed"])
def test_occlusion_rate_and_forced_iou(mode):
    scene = SceneSpec(occlusion_mode=mode, occlusion_rate=0.4, seed=3)
    fig = FigureSpec()
    poses = [sample_pose(fig, scene, sample_stream(i, scene)) for i in range(1000)]
    rate = np.mean([bool(p.occlusions) for p in poses])
    assert abs(rate - 0.4) <= 0.03
    for p in poses:
        for _, _, v in p.occlusions:
            assert 0.1 <= v <= 0.6


def test_no_occlusion_mode_keeps_siblings_apart():
    scene = SceneSpec(seed=4)
    for i in range(50):
        p = sample_pose(FigureSpec(), scene, sample_stream(i, scene))
        assert p.occlusions == []
        assert (p.points >= 0).all() and (p.points[:, 0] < 128).all() and (p.points[:, 1] < 128).all()


def test_generation_is_deterministic_per_index():
    scene = SceneSpec(seed=5, occlusion_mode="mixed", occlusion_rate=0.5)
    a = list(generate(4, scene, n_neg=1))
    b = list(generate(2, scene, start=2))
    assert np.array_equal(a[2].image, b[0].image) and np.array_equal(a[3].pose.points, b[1].pose.points)
    assert a[4].pose is None and a[0].image.shape == (128, 128)
    assert 0.0 <= a[0].image.min() and a[0].image.max() <= 1.0


def test_written_dataset_passes_manifest_validation(tmp_path):
    scene = SceneSpec(seed=6, background="flat", occlusion_mode="legs_crossed", occlusion_rate=1.0)
    path = write_dataset(tmp_path, 3, scene, n_neg=2, split="test")
    m = load_manifest(path)
    assert m.split == "test" and len(m.positives) == 3 and len(m.negatives) == 2
    assert all(e.points.shape == (layout.NUM_PARTS, 2) for e in m.positives)
    occl = (tmp_path / "test.occlusions").read_text().splitlines()
    assert len(occl) == 1 + 3


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(occlusion_rate=1.5)
    with pytest.raises(ValueError):
        SceneSpec(background="stripes")
    with pytest.raises(ValueError):
        FigureSpec(torso=-1.0)
