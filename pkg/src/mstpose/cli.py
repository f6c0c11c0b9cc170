"""Command-line front end: synth, train, infer, eval and inspect.

Every subcommand writes only under its ``--out`` directory, mirrors its log
there, and exits 0 only when no error (or skipped input) was recorded.  The
log level comes from the MSTPOSE_LOG environment variable.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

log = logging.getLogger("mstpose")

LOG_NAME = "mstpose.log"
POSE_MAGIC = "# mstpose-pose 1"


class _Counter(logging.Handler):
    """Counts warnings and errors so the exit code can reflect them."""

    def __init__(self):
        super().__init__(logging.WARNING)
        self.warnings = 0
        self.errors = 0

    def emit(self, record):
        if record.levelno >= logging.ERROR:
            self.errors += 1
        else:
            self.warnings += 1


def _setup_logging(out_dir: Path | None) -> tuple[_Counter, list[logging.Handler]]:
    level_name = os.environ.get("MSTPOSE_LOG", "INFO").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.INFO
    root = logging.getLogger("mstpose")
    root.setLevel(level)
    root.propagate = False
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers: list[logging.Handler] = []
    stream = logging.StreamHandler(sys.stderr)
    stream.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    handlers.append(stream)
    if out_dir is not None:
        fh = logging.FileHandler(out_dir / LOG_NAME, mode="w")
        fh.setFormatter(fmt)
        # warnings always reach the file, whatever the console level
        fh.setLevel(min(level, logging.WARNING))
        handlers.append(fh)
        root.setLevel(min(level, logging.WARNING))
        stream.setLevel(level)
    counter = _Counter()
    handlers.append(counter)
    for h in handlers:
        root.addHandler(h)
    return counter, handlers


def _teardown(handlers) -> None:
    root = logging.getLogger("mstpose")
    for h in handlers:
        root.removeHandler(h)
        h.close()


def _model_seed(model) -> str:
    for line in str(model.meta.get("config", "")).splitlines():
        key, _, val = line.partition("=")
        if key.strip() == "seed":
            return val.strip()
    return "unknown"


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# ----------------------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    from .synth import FigureSpec, SceneSpec, generate, write_dataset

    scene = SceneSpec(args.width, args.height, args.background, args.occlusion_mode, args.occlusion_rate,
                      args.seed)
    path = write_dataset(args.out, args.n_pos, scene, FigureSpec(), args.n_neg, args.name, args.split, args.start)
    log.info("wrote %d positives and %d negatives, manifest %s", args.n_pos, args.n_neg, path)
    if args.preview and args.n_pos:
        from .plotting import save_overlay

        s = next(iter(generate(1, scene, FigureSpec(), 0, args.start)))
        save_overlay(Path(args.out) / f"{args.split}_preview.png", s.image, truth=s.pose.points,
                     title=f"seed={args.seed}")
    return 0


# ----------------------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from .config import load_config, parse_config
    from .evaluation import load_manifest
    from .modelio import save_model
    from .plotting import save_objective_plot
    from .training import TrainLog, samples_from_manifest, train

    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    cfg = load_config(_require_file(args.config, "config") if args.config else None)
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed = {args.seed}")
    if overrides:
        cfg = parse_config("\n".join(overrides), cfg)
    if not manifest.positives:
        raise ValueError("training manifest has no positive (annotated) images")
    if not manifest.negatives:
        raise ValueError("training needs negative (person-free) images in the manifest for hard-negative mining")
    out = Path(args.out)
    log.info("loading %d positives and %d negatives (seed %d)", len(manifest.positives),
             len(manifest.negatives), cfg.seed)
    pos, neg = samples_from_manifest(manifest, cfg, args.jobs)
    train_log = TrainLog()
    model = train(pos, neg, cfg, train_log, args.jobs)
    model_path = out / args.model_name
    save_model(model, model_path)
    (out / "train_log.csv").write_text(f"# seed={cfg.seed}\n" + train_log.to_csv())
    if train_log.rows:
        save_objective_plot(out / "objective.png", train_log.rows)
    log.info("model written to %s", model_path)
    return 0


# ----------------------------------------------------------------------------------------
# infer


def format_pose(estimates, model, pyramid, image_name: str, occlusion: bool) -> str:
    """Text record per detection: mixtures, one line per part, then the score breakdown."""
    from .inference import part_scores

    lines = [f"{POSE_MAGIC} image={image_name} seed={_model_seed(model)} occlusion={'on' if occlusion else 'off'}"]
    for i, est in enumerate(estimates):
        parts = part_scores(model, pyramid, est)
        lines.append(f"detection {i} level {est.level} scale {est.scale!r}")
        for name in sorted(est.mixtures):
            lines.append(f"mixture {name} {est.mixtures[name]}")
        for name, p in est.parts.items():
            b = p.box
            lines.append(f"part {name} type {p.type_id} box {b.x_min!r} {b.y_min!r} {b.x_max!r} {b.y_max!r} "
                         f"score {parts[name]!r}")
        appearance = sum(parts.values())
        lines.append(f"structure {est.score - est.penalty - appearance!r}")
        lines.append(f"penalty {est.penalty!r}")
        lines.append(f"total {est.score!r}")
    return "\n".join(lines) + "\n"


def read_pose(text: str) -> list[dict]:
    """Parse a pose file back into one dict per detection."""
    dets: list[dict] = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        tok = line.split()
        if tok[0] == "detection":
            dets.append({"level": int(tok[3]), "scale": float(tok[5]), "mixtures": {}, "parts": {}})
        elif tok[0] == "mixture":
            dets[-1]["mixtures"][tok[1]] = int(tok[2])
        elif tok[0] == "part":
            dets[-1]["parts"][tok[1]] = {"type": int(tok[3]), "box": tuple(float(v) for v in tok[5:9]),
                                         "score": float(tok[10])}
        elif tok[0] in ("structure", "penalty", "total"):
            dets[-1][tok[0]] = float(tok[1])
        else:
            raise ValueError(f"unknown pose-file record {tok[0]!r}")
    return dets


def cmd_infer(args) -> int:
    from .features import load_image, save_image
    from .inference import detect, pyramid_for
    from .modelio import load_model
    from .plotting import save_overlay

    model = load_model(_require_file(args.model, "model"))
    occlusion = args.occlusion == "on"
    out = Path(args.out)
    failed = 0

    def one(path: str):
        try:
            image = load_image(path)
        except (OSError, ValueError) as exc:
            return path, None, None, exc
        return path, image, detect(model, image, occlusion, args.threshold, args.max_detections), None

    with ThreadPoolExecutor(max(1, args.jobs)) as ex:
        results = list(ex.map(one, args.images))
    for path, image, ests, exc in results:
        stem = Path(path).stem
        if exc is not None:
            log.warning("skipping unreadable image %s: %s", path, exc)
            failed += 1
            continue
        (out / f"{stem}.pose").write_text(format_pose(ests, model, pyramid_for(model, image) if ests else None,
                                                      Path(path).name, occlusion))
        if ests:
            save_overlay(out / f"{stem}_overlay.png", image, ests[0], title=f"J={ests[0].score:.3f}")
        else:
            save_image(out / f"{stem}_overlay.png", image)
        log.info("%s: %d detection(s)", path, len(ests))
    return 1 if failed else 0


# ----------------------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from .evaluation import PCP_ALPHA, compare_table, evaluate, load_manifest
    from .modelio import load_model
    from .plotting import save_pcp_chart

    model = load_model(_require_file(args.model, "model"))
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    out = Path(args.out)
    loose = args.pcp == "loose"
    header = f"# model={Path(args.model).name} manifest={Path(args.manifest).name} seed={_model_seed(model)} " \
             f"pcp={args.pcp}\n"

    def run(occ: bool):
        return evaluate(model, manifest, occlusion=occ, alpha=PCP_ALPHA, loose=loose, jobs=args.jobs,
                        threshold=args.threshold)

    if args.compare:
        base, oa = run(False), run(True)
        (out / "report.txt").write_text(header + compare_table(base, oa) + "\n")
        (out / "report_mst.csv").write_text(header + base.to_csv())
        (out / "report_oa.csv").write_text(header + oa.to_csv())
        save_pcp_chart(out / "pcp.png", [base, oa])
        print(compare_table(base, oa))
    else:
        rep = run(args.occlusion == "on")
        (out / "report.txt").write_text(header + rep.to_text() + "\n")
        (out / "report.csv").write_text(header + rep.to_csv())
        save_pcp_chart(out / "pcp.png", [rep])
        print(rep.to_text())
    return 0


# ----------------------------------------------------------------------------------------
# inspect


def summary(model) -> str:
    from .model import ParamIndex

    lines = [f"seed {_model_seed(model)}", f"cell_size {model.cell_size}",
             f"parameters {ParamIndex(model).size}", f"upper parts {len(model.upper)}"]
    for name, st in model.subtrees.items():
        sizes = ", ".join(str(len(mx.nodes)) for mx in st.mixtures)
        lines.append(f"sub-tree {name}: parent {st.parent}, {st.M} mixtures with {sizes} nodes")
    for (a, b), (lam, lo, hi) in sorted(model.occlusion.pairs.items()):
        lines.append(f"occlusion {a} {b}: lambda {lam:.4f} bounds [{lo:.4f}, {hi:.4f}]")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    from .modelio import load_model, to_text

    model = load_model(_require_file(args.model, "model"))
    text = summary(model) if args.summary else to_text(model)
    if args.out:
        (Path(args.out) / ("summary.txt" if args.summary else "model.txt")).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ----------------------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    from .synth import BACKGROUNDS, OCCLUSION_MODES

    p = argparse.ArgumentParser(prog="mstpose", description="Mixture-of-sub-trees pose estimation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n-pos", type=int, default=200)
    s.add_argument("--n-neg", type=int, default=100)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--background", choices=BACKGROUNDS, default="noise")
    s.add_argument("--occlusion-mode", choices=OCCLUSION_MODES, default="none")
    s.add_argument("--occlusion-rate", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train")
    s.add_argument("--name", default="synth")
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--preview", action="store_true", help="also render the first pose with its skeleton")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="learn a model from a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--seed", type=int)
    t.add_argument("--model-name", default="model.mstmodel")
    t.add_argument("--jobs", type=int, default=1)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="estimate poses in images")
    i.add_argument("--model", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--occlusion", choices=("on", "off"), default="on")
    i.add_argument("--threshold", type=float)
    i.add_argument("--max-detections", type=int, default=1)
    i.add_argument("--jobs", type=int, default=1)
    i.add_argument("images", nargs="+")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PCP report on an annotated manifest")
    e.add_argument("--model", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--occlusion", choices=("on", "off"), default="on")
    e.add_argument("--compare", action="store_true", help="run with and without occlusion and tabulate the delta")
    e.add_argument("--pcp", choices=("strict", "loose"), default="strict")
    e.add_argument("--threshold", type=float)
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("inspect", help="print a model as text")
    n.add_argument("model")
    n.add_argument("--summary", action="store_true")
    n.add_argument("--out")
    n.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if getattr(args, "out", None) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    counter, handlers = _setup_logging(out)
    try:
        code = args.func(args)
    except Exception as exc:  # noqa: BLE001  every failure becomes a message and a nonzero exit
        log.error("%s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        code = 2
    finally:
        _teardown(handlers)
    if counter.errors and code == 0:
        code = 1
    return code


if __name__ == "__main__":
    sys.exit(main())
