import numpy as np
import pytest

from mstpose.cli import main, read_pose
from mstpose.evaluation import PcpReport, load_manifest
from mstpose.features import load_image
from mstpose.inference import PoseEstimate, pyramid_for, rescore
from mstpose.model import validate
from mstpose.modelio import from_text, load_model

SMALL = "M = 1\nK_limb = 2\nK_other = 2\nrounds_subtree = 1\nrounds_full = 1\nepochs = 3\nmax_levels = 1\n"


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n-pos", "8", "--n-neg", "3", "--seed", "3",
                 "--occlusion-mode", "legs_crossed", "--occlusion-rate", "0.5", "--preview"]) == 0
    assert main(["synth", "--out", str(root / "test"), "--n-pos", "3", "--n-neg", "0", "--seed", "4",
                 "--split", "test", "--occlusion-mode", "legs_crossed", "--occlusion-rate", "1"]) == 0
    (root / "small.cfg").write_text(SMALL)
    assert main(["train", "--manifest", str(root / "data" / "train.manifest"), "--config", str(root / "small.cfg"),
                 "--set", "pose_negatives=1", "--out", str(root / "run")]) == 0
    return root


def _snapshot(path):
    return sorted((p.relative_to(path), p.stat().st_mtime_ns) for p in path.rglob("*") if p.is_file())


def test_synth_outputs(workdir):
    m = load_manifest(workdir / "data" / "train.manifest")
    assert len(m.positives) == 8 and len(m.negatives) == 3
    assert (workdir / "data" / "train_preview.png").is_file()


def test_train_outputs(workdir):
    run = workdir / "run"
    model = load_model(run / "model.mstmodel")
    assert validate(model) == []
    log_lines = (run / "train_log.csv").read_text().splitlines()
    assert log_lines[0] == "# seed=0" and log_lines[1].startswith("stage,round,epoch,objective")
    assert len(log_lines) > 2
    assert (run / "objective.png").stat().st_size > 0
    assert (run / "mstpose.log").read_text().count("model written") == 1


def test_train_without_negatives_fails_cleanly(workdir, tmp_path):
    lines = (workdir / "data" / "train.manifest").read_text().splitlines()
    keep = [ln for ln in lines if " neg" not in ln]
    (workdir / "data" / "pos_only.manifest").write_text("\n".join(keep) + "\n")
    out = tmp_path / "nope"
    code = main(["train", "--manifest", str(workdir / "data" / "pos_only.manifest"), "--out", str(out)])
    assert code != 0
    assert "negative" in (out / "mstpose.log").read_text()
    assert not any(p.suffix == ".mstmodel" or ".tmp" in p.name for p in out.iterdir())
    (workdir / "data" / "pos_only.manifest").unlink()


def test_bad_config_key_fails(workdir, tmp_path):
    code = main(["train", "--manifest", str(workdir / "data" / "train.manifest"), "--set", "bogus=1",
                 "--out", str(tmp_path)])
    assert code != 0 and "bogus" in (tmp_path / "mstpose.log").read_text()


def test_infer_pose_file_reproduces_score(workdir, tmp_path):
    model = load_model(workdir / "run" / "model.mstmodel")
    img = workdir / "test" / "images" / "test_00000.png"
    before = _snapshot(workdir / "test")
    assert main(["infer", "--model", str(workdir / "run" / "model.mstmodel"), "--out", str(tmp_path),
                 str(img)]) == 0
    assert _snapshot(workdir / "test") == before
    dets = read_pose((tmp_path / "test_00000.pose").read_text())
    assert len(dets) == 1
    d = dets[0]
    parts = d["parts"]
    assert len(parts) == 26
    assert sum(p["score"] for p in parts.values()) + d["structure"] + d["penalty"] == pytest.approx(
        d["total"], abs=1e-6)
    # rebuild the configuration from the file and score it term by term
    image = load_image(img)
    est = detect_est(model, image, d)
    assert rescore(model, pyramid_for(model, image), est) == pytest.approx(d["total"], abs=1e-6)
    assert (tmp_path / "test_00000_overlay.png").is_file()


def detect_est(model, image, d):
    from mstpose.inference import detect

    best = detect(model, image, occlusion=True, max_detections=1)[0]
    for name, p in d["parts"].items():
        x0, y0, x1, y1 = p["box"]
        y = int(round((y0 + y1) / 2 / d["scale"] - 0.5))
        x = int(round((x0 + x1) / 2 / d["scale"] - 0.5))
        assert (best.parts[name].y, best.parts[name].x, best.parts[name].type_id) == (y, x, p["type"])
    assert best.mixtures == d["mixtures"]
    est = PoseEstimate(d["total"], d["level"], d["scale"], dict(best.parts), dict(best.latent),
                       dict(best.mixtures), d["penalty"])
    return est


def test_infer_no_detection_and_unreadable(workdir, tmp_path):
    img = workdir / "test" / "images" / "test_00001.png"
    code = main(["infer", "--model", str(workdir / "run" / "model.mstmodel"), "--out", str(tmp_path),
                 "--threshold", "1e9", str(img), str(tmp_path / "missing.png")])
    assert code == 1
    assert read_pose((tmp_path / "test_00001.pose").read_text()) == []
    assert np.array_equal(load_image(tmp_path / "test_00001_overlay.png"), load_image(img))
    assert "skipping unreadable image" in (tmp_path / "mstpose.log").read_text()


def test_eval_reports(workdir, tmp_path):
    args = ["eval", "--model", str(workdir / "run" / "model.mstmodel"),
            "--manifest", str(workdir / "test" / "test.manifest")]
    assert main(args + ["--out", str(tmp_path / "one"), "--occlusion", "off"]) == 0
    text = (tmp_path / "one" / "report.txt").read_text()
    rep = PcpReport.from_csv("\n".join(ln for ln in (tmp_path / "one" / "report.csv").read_text().splitlines()
                                       if not ln.startswith("#")))
    assert rep.label == "MST" and rep.images == 3
    assert f"{rep.total:8.1f}" in text
    assert main(args + ["--out", str(tmp_path / "cmp"), "--compare", "--pcp", "loose"]) == 0
    table = (tmp_path / "cmp" / "report.txt").read_text().splitlines()
    assert table[0].startswith("#") and "pcp=loose" in table[0]
    assert table[-1].startswith("delta") and len(table[-1].split()) == 8
    assert (tmp_path / "cmp" / "pcp.png").stat().st_size > 0


def test_inspect(workdir, tmp_path, capsys):
    path = workdir / "run" / "model.mstmodel"
    assert main(["inspect", str(path)]) == 0
    text = capsys.readouterr().out
    back = from_text(text)
    assert validate(back) == []
    assert main(["inspect", str(path), "--summary", "--out", str(tmp_path)]) == 0
    assert "sub-tree left_leg" in (tmp_path / "summary.txt").read_text()


def test_missing_model_and_log_level(tmp_path, monkeypatch):
    monkeypatch.setenv("MSTPOSE_LOG", "DEBUG")
    code = main(["eval", "--model", str(tmp_path / "none.mstmodel"), "--manifest", str(tmp_path / "x"),
                 "--out", str(tmp_path / "o")])
    assert code == 2
    log = (tmp_path / "o" / "mstpose.log").read_text()
    assert "model not found" in log and "DEBUG" in log
