import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mstpose import layout
from mstpose.evaluation import (Manifest, ManifestEntry, ManifestError, PcpReport, augment, compare_table,
                                load_manifest, mirror_points, pcp_limb, rotate_points, score_estimates,
                                transform_image, transform_points, write_manifest)
from mstpose.features import save_image
from mstpose.synth import SceneSpec, generate

LIMB = np.array([[0.0, 0.0], [2.0, 0.0]])  # true limb of length 2


def test_exact_match_is_detected():
    assert pcp_limb(LIMB, LIMB)


def test_strict_boundary_at_half_length():
    # both endpoints exactly 0.5 L away count; 0.51 L does not
    assert pcp_limb(LIMB + [[0.0, 1.0], [0.0, -1.0]], LIMB)
    assert not pcp_limb(LIMB + [[0.0, 1.02], [0.0, -1.02]], LIMB)


def test_strict_needs_both_endpoints():
    est = LIMB + [[0.0, 0.6], [0.0, 1.2]]  # 0.3 L and 0.6 L
    assert not pcp_limb(est, LIMB)
    assert pcp_limb(est, LIMB, loose=True)  # mean error 0.45 L


def test_zero_length_limb_and_alpha():
    z = np.zeros((2, 2))
    assert pcp_limb(z, z) and not pcp_limb(z + 1e-9, z)
    with pytest.raises(ValueError):
        pcp_limb(LIMB, LIMB, alpha=0)


@settings(max_examples=200)
@given(st.lists(st.floats(-100, 100), min_size=8, max_size=8), st.sampled_from([0.5, 2.0, 10.0]),
       st.booleans())
def test_scale_invariance(coords, s, loose):
    est = np.array(coords[:4]).reshape(2, 2)
    tru = np.array(coords[4:]).reshape(2, 2)
    assert pcp_limb(est * s, tru * s, loose=loose) == pcp_limb(est, tru, loose=loose)


def _truth():
    return next(iter(generate(1, SceneSpec(seed=1)))).pose.points


def test_report_perfect_and_empty():
    t = _truth()
    rep = score_estimates([t, t], [t, t])
    assert all(v == 100.0 for v in rep.row().values())
    assert score_estimates([t], [None]).total == 0.0


def test_report_hand_tally():
    t = _truth()
    bad = t.copy()
    bad[layout.PART_INDEX["wrist_l"]] += 100.0  # breaks the left lower arm only
    rep = score_estimates([t, t], [t, bad])
    assert rep.limb_pcp("L.Arm") == 75.0
    assert rep.limb_pcp("Torso") == 100.0
    assert rep.total == pytest.approx(100.0 * 19 / 20)
    # a missed detection scales the total by the detection rate
    rep = score_estimates([t, t], [t, None])
    assert rep.detection_rate == 0.5 and rep.total == 50.0


def test_report_csv_round_trip_and_compare():
    t = _truth()
    bad = t + 30.0
    a = score_estimates([t, t, t], [t, bad, None], label="MST")
    b = PcpReport.from_csv(a.to_csv())
    assert b.row() == a.row() and b.label == "MST" and b.images == 3 and b.detected == 2
    table = compare_table(a, score_estimates([t, t, t], [t, t, t], label="OA-MST")).splitlines()
    assert len(table) == 4 and table[-1].startswith("delta")
    assert len(table[-1].split()) == 1 + len(layout.LIMB_COLUMNS) + 1


def _manifest(tmp_path, n=3):
    entries = []
    for i, s in enumerate(generate(n, SceneSpec(seed=2), n_neg=1)):
        rel = f"img{i}.png"
        save_image(tmp_path / rel, s.image)
        entries.append(ManifestEntry(rel, None if s.pose is None else s.pose.points))
    m = Manifest("toy", "train", entries, root=tmp_path)
    write_manifest(tmp_path / "toy.manifest", m, ["comment"])
    return m


def test_manifest_round_trip(tmp_path):
    m = _manifest(tmp_path)
    back = load_manifest(tmp_path / "toy.manifest")
    assert (back.name, back.split, back.limbs) == ("toy", "train", layout.LIMBS)
    assert len(back.positives) == 3 and len(back.negatives) == 1
    for a, b in zip(m.entries, back.entries):
        assert a.path == b.path
        assert (a.points is None and b.points is None) or np.array_equal(a.points, b.points)


def test_manifest_errors_name_the_line(tmp_path):
    _manifest(tmp_path)
    lines = (tmp_path / "toy.manifest").read_text().splitlines()
    bad = lines[:2] + [" ".join(lines[2].split()[:-2])]
    (tmp_path / "bad.manifest").write_text("\n".join(bad) + "\n")
    with pytest.raises(ManifestError, match="line 3.*img0.png.*25 parts"):
        load_manifest(tmp_path / "bad.manifest")
    (tmp_path / "missing.manifest").write_text(lines[1] + "\nnope.png neg\n")
    with pytest.raises(ManifestError, match="missing image"):
        load_manifest(tmp_path / "missing.manifest")
    (tmp_path / "negpts.manifest").write_text(lines[1] + "\nimg3.png neg 1 2\n")
    with pytest.raises(ManifestError, match="carries coordinates"):
        load_manifest(tmp_path / "negpts.manifest")


def test_mirror_and_rotation_transforms():
    t = _truth()
    np.testing.assert_allclose(mirror_points(mirror_points(t, 128), 128), t)
    np.testing.assert_allclose(rotate_points(t, 0.0, (128, 128)), t)
    np.testing.assert_allclose(rotate_points(rotate_points(t, 10, (128, 128)), -10, (128, 128)), t, atol=1e-6)
    m = mirror_points(t, 128)
    assert m[layout.PART_INDEX["knee_r"], 0] == pytest.approx(128 - t[layout.PART_INDEX["knee_l"], 0])


def test_rotation_agrees_with_image_rotation():
    img = np.zeros((64, 64))
    img[20, 40] = 1.0
    pts = np.zeros((layout.NUM_PARTS, 2))
    pts[:] = (40.5, 20.5)  # pixel centre in (x, y)
    rot = transform_image(img, False, 12.0)
    y, x = np.unravel_index(np.argmax(rot), rot.shape)
    px, py = transform_points(pts, False, 12.0, (64, 64))[0]
    assert abs(px - (x + 0.5)) <= 1.0 and abs(py - (y + 0.5)) <= 1.0


def test_augment_counts(tmp_path):
    m = _manifest(tmp_path)
    out = augment(m, rotations=[-5.0, 5.0], mirror=True)
    assert len(out.entries) <= len(m.entries) * 2 * 3
    flags = {e.flag() for e in out.entries}
    assert "pos|mirror|rot=5.0" in flags and "neg" in flags
    with pytest.raises(ValueError):
        augment(m, rotations=[20.0])
