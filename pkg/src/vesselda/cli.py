"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (manifest marked failed),
2 configuration error.
"""

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
import traceback
from pathlib import Path

import torch
from filelock import FileLock, Timeout

from . import __version__, io, stages
from .config import PRESETS, config_hash, load_config
from .errors import ConfigError

log = logging.getLogger("vesselda")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
MANIFEST = "manifest.json"


def file_checksums(paths):
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.name in (MANIFEST, ".lock") or f.suffix == ".tmp":
                continue
            out[str(f)] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


class Run:
    """Lock an output directory and write its manifest when the command ends."""

    def __init__(self, command, out_dir, cfg=None, inputs=(), argv=None):
        self.command = command
        self.out_dir = Path(out_dir)
        self.cfg = cfg
        self.inputs = [Path(p) for p in inputs if p is not None]
        self.argv = argv
        self.lock = None

    def __enter__(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.out_dir / ".lock"))
        self.lock.acquire(timeout=1)
        self.start = time.time()
        self.before = {f for f in self.out_dir.rglob("*") if f.is_file()}
        self.input_sums = file_checksums(p for p in self.inputs if p.exists())
        return self

    def finish(self, status, summary=None, error=None, sub_manifests=(), extra=None):
        artifacts = sorted(
            str(f.relative_to(self.out_dir)) for f in self.out_dir.rglob("*")
            if f.is_file() and f.name not in (MANIFEST, ".lock") and not f.name.endswith(".tmp")
            and not any(Path(m).parent in f.parents for m in sub_manifests)
        )
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "status": status,
            "code_version": __version__,
            "platform": {"python": platform.python_version(), "torch": torch.__version__, "machine": platform.machine()},
            "config": None if self.cfg is None else self.cfg.to_dict(),
            "config_hash": None if self.cfg is None else self.cfg.hash(),
            "seed": None if self.cfg is None else self.cfg.seed,
            "start_time": self.start,
            "end_time": time.time(),
            "inputs": self.input_sums,
            "artifacts": artifacts,
            "sub_manifests": [str(m) for m in sub_manifests],
            "summary_metrics": summary or {},
            "error": error,
            **(extra or {}),
        }
        io.write_json(self.out_dir / MANIFEST, manifest)
        return manifest

    def __exit__(self, *exc):
        self.lock.release()
        return False


def _config(args):
    return load_config(getattr(args, "config", None), getattr(args, "set", None) or (),
                       getattr(args, "preset", "desk"))


def _run(args, command, out_dir, cfg, inputs, body, subs=None, extra=None):
    """Execute ``body() -> summary`` inside a manifest-writing run.

    ``subs`` collects manifests of nested runs whose files this manifest
    must not claim.
    """
    subs = [] if subs is None else subs
    try:
        with Run(command, out_dir, cfg, inputs, sys.argv[1:]) as run:
            try:
                summary = body()
            except ConfigError:
                raise
            except Exception as exc:
                log.error("%s failed: %s", command, exc)
                log.debug("%s", traceback.format_exc())
                run.finish("failed", error=f"{type(exc).__name__}: {exc}", sub_manifests=subs)
                return EXIT_RUNTIME
            run.finish("ok", summary, sub_manifests=subs, extra=extra)
            print(f"{command}: ok -> {Path(out_dir) / MANIFEST}")
            return EXIT_OK
    except Timeout:
        log.error("output directory %s is locked by another command", out_dir)
        return EXIT_RUNTIME


def cmd_synth(args, cfg):
    return _run(args, "synth", args.out, cfg, [args.config], lambda: stages.synth_stage(cfg, args.out))


def cmd_preprocess(args, cfg):
    return _run(args, "preprocess", args.out, cfg, [args.inp],
                lambda: stages.preprocess_stage(cfg, args.inp, args.out))


def cmd_train_phase1(args, cfg):
    return _run(args, "train-phase1", args.out, cfg, [args.data],
                lambda: stages.phase1_stage(cfg, args.data, args.out))


def cmd_train_phase2(args, cfg):
    ckpt = Path(args.phase1_ckpt)
    return _run(args, "train-phase2", args.out, cfg, [args.data, ckpt.with_suffix(".pt")],
                lambda: stages.phase2_stage(cfg, ckpt, args.data, args.out))


def cmd_infer(args, cfg):
    ckpt = Path(args.ckpt)
    return _run(args, "infer", args.out, cfg, [args.inp, ckpt.with_suffix(".pt")],
                lambda: stages.infer_stage(cfg, ckpt, args.inp, args.out))


def cmd_baseline_sato(args, cfg):
    if args.scales:
        cfg.sato.scales_px = tuple(sorted(args.scales))
    return _run(args, "baseline-sato", args.out, cfg, [args.inp],
                lambda: stages.sato_stage(cfg, args.inp, args.out, polarity=args.polarity))


def cmd_evaluate(args, cfg):
    out = Path(args.out)
    return _run(args, "evaluate", out.parent, None, [args.pred, args.gt],
                lambda: stages.evaluate_stage(args.pred, args.gt, out))


def cmd_figures(args, cfg):
    run_dir = Path(args.run_dir) if args.run_dir else None
    out = Path(args.out) if args.out else run_dir / "figures"
    images = args.images or (run_dir / "data")
    preds = [Path(args.pred)] if args.pred else sorted(p for p in (run_dir / "infer").glob("*") if p.is_dir())

    def body():
        return {"figures": sum(stages.figures_stage(images, p, out)["figures"] for p in preds)}

    return _run(args, "figures", out, None, [], body)


# config sections each pipeline stage depends on; a stage is reused under
# --resume only when this slice of the config (and the code version) is unchanged
STAGE_SECTIONS = {
    "synth": ("seed", "image_size", "synthgen"),
    "data": ("seed", "image_size", "synthgen", "preproc"),
    "phase1": ("seed", "image_size", "synthgen", "preproc", "net", "phase1"),
    "phase2": ("seed", "image_size", "synthgen", "preproc", "net", "phase1", "phase2"),
}


def stage_key(cfg, name):
    d = cfg.to_dict()
    sections = STAGE_SECTIONS.get(name.split("/")[0], tuple(d))
    return config_hash({"code_version": __version__, **{k: d[k] for k in sections}})


def cmd_pipeline(args, cfg):
    root = Path(args.out)
    subs = []

    def stage(name, fn, inputs=()):
        key = stage_key(cfg, name)
        manifest = root / name / MANIFEST
        subs.append(manifest)
        if args.resume and manifest.exists():
            previous = json.loads(manifest.read_text())
            if previous.get("status") == "ok" and previous.get("stage_key") == key:
                print(f"{name}: reused {manifest}")
                return previous.get("summary_metrics", {})
        code = _run(args, name, root / name, cfg, inputs, fn, extra={"stage_key": key})
        if code != EXIT_OK:
            raise RuntimeError(f"stage {name} failed; see {manifest}")
        return io_summary(root / name)

    def body():
        stage("synth", lambda: stages.synth_stage(cfg, root / "synth"))
        stage("data", lambda: stages.preprocess_stage(cfg, root / "synth", root / "data"), [root / "synth"])
        p1 = stage("phase1", lambda: stages.phase1_stage(cfg, root / "data", root / "phase1"), [root / "data"])
        p2 = stage("phase2", lambda: stages.phase2_stage(cfg, root / "phase1" / "ckpt", root / "data", root / "phase2"),
                   [root / "phase1" / "ckpt.pt"])
        ckpt = root / "phase2" / "ckpt"
        summary = {"phase1": p1, "phase2": p2}
        for split in ("test_source", "test_target"):
            ours = stage(f"infer/{split}", lambda: stages.infer_stage(cfg, ckpt, root / "data", root / "infer" / split,
                                                                     [split]), [ckpt.with_suffix(".pt")])
            sato = stage(f"sato/{split}", lambda: stages.sato_stage(cfg, root / "data", root / "sato" / split, [split]))
            summary[split] = {"ours": ours, "sato": sato}
        for method in ("infer", "sato"):
            for split in ("test_source", "test_target"):
                stage(f"eval/{method}_{split}",
                      lambda: stages.evaluate_stage(root / method / split, root / "data", root / "eval" / f"{method}_{split}" / "report.json"))
        stage("figures", lambda: {split: stages.figures_stage(root / "data", root / "infer" / split, root / "figures")
                                  for split in ("test_source", "test_target")})
        tgt, src = summary["test_target"], summary["test_source"]
        summary["headline"] = {
            "target_vessel_dice": tgt["ours"].get("vessel_dice"),
            "target_vessel_dice_sato": tgt["sato"].get("vessel_dice"),
            "source_vessel_dice": src["ours"].get("vessel_dice"),
            "source_vessel_dice_sato": src["sato"].get("vessel_dice"),
        }
        print(json_line(summary["headline"]))
        return summary

    return _run(args, "pipeline", root, cfg, [args.config], body, subs=subs)


def io_summary(directory):
    path = Path(directory) / MANIFEST
    return json.loads(path.read_text()).get("summary_metrics", {}) if path.exists() else {}


def json_line(d):
    return " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in d.items())


def build_parser():
    parser = argparse.ArgumentParser(prog="vesselda", description="Semi-supervised vessel segmentation toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--seed", type=int)
        return p

    p = with_config(sub.add_parser("synth", help="generate the synthetic phantom corpus"))
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("preprocess", help="normalize volumes into network inputs"))
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_preprocess)

    p = with_config(sub.add_parser("train-phase1", help="adversarial generator training"))
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train_phase1)

    p = with_config(sub.add_parser("train-phase2", help="encoder and label-branch training"))
    p.add_argument("--phase1-ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train_phase2)

    p = with_config(sub.add_parser("infer", help="segment stored volumes"))
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_infer)

    p = with_config(sub.add_parser("baseline-sato", help="Sato vesselness baseline"))
    p.add_argument("--in", dest="inp", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--scales", type=float, nargs="+")
    p.add_argument("--polarity", choices=("bright", "dark"), help="default: from each volume's domain")
    p.set_defaults(func=cmd_baseline_sato)

    p = sub.add_parser("evaluate", help="metrics of predicted against reference masks")
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="report JSON path; a .txt table is written alongside")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("figures", help="MIP/mIP panels and overlays")
    p.add_argument("--run-dir", type=Path, help="pipeline output directory")
    p.add_argument("--images", type=Path)
    p.add_argument("--pred", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_figures)

    p = with_config(sub.add_parser("pipeline", help="synth -> preprocess -> phase1 -> phase2 -> infer -> evaluate"))
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--resume", action="store_true",
                   help="reuse finished stages whose configuration slice is unchanged")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "figures" and not (args.run_dir or (args.images and args.pred and args.out)):
        parser.error("figures needs --run-dir or all of --images, --pred and --out")
    cfg = None
    try:
        if hasattr(args, "preset"):
            if args.seed is not None:
                args.set = (args.set or []) + [f"seed={args.seed}"]
            cfg = _config(args)
            torch.use_deterministic_algorithms(True, warn_only=True)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
