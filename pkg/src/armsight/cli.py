"""Command-line entry point: gen-data, train, eval, infer, gradcheck, report.

Settings resolve as built-in defaults < --config JSON file < explicit flags,
and every run prints the resolved settings before doing any work.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

GLOBAL_DEFAULTS = {"seed": 0, "out_dir": "runs", "threads": 1, "params": None}

DEFAULTS = {
    "gen-data": {"type": "all", "count": 100, "paper_analog": False, "resolution": "64x53",
                 "dataset_dir": None, "split_ratio": 0.8, "stratify": False,
                 "calibration_sigma": 0.002, "workers": 1},
    "train": {"dataset_dir": None, "split_ratio": 0.8, "stratify": False, "batch_size": 64,
              "lr_start": 1e-3, "lr_end": 1e-6, "iterations": 2000, "optimizer": "sgd_momentum",
              "momentum": 0.9, "checkpoint_every": 100, "w_mask": 1.0, "w_jcoords": 1.5,
              "w_bcoords": 1.5, "w_type": 0.3, "paper_eq3_literal": False, "class_weights": "image", "resume": False,
              "model_config": None, "dtype": "float32"},
    "eval": {"dataset_dir": None, "checkpoint": None, "split": "test", "split_ratio": 0.8,
             "stratify": False, "threshold": 0.5, "report_dir": None},
    "infer": {"image": None, "checkpoint": None, "camera": None, "output": None},
    "gradcheck": {"tolerance": 1e-4, "smooth_tolerance": 1e-6, "skip_model": False},
    "report": {"report_json": None, "report_dir": None},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_globals(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON file of settings (flags win)")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--out-dir", default=d, help="working directory for outputs (default runs)")
    p.add_argument("--threads", type=int, default=d, help="BLAS threads (default 1)")
    p.add_argument("--params", default=d, help="alternate robot parameter INI file")


def _flag(p, name, **kw):
    p.add_argument(name, default=None, **kw)


def _bool(p, name, help=None):
    p.add_argument(name, action="store_const", const=True, default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="armsight", description="Robot arm perception from synthetic images.")
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    _add_globals(g, suppress=True)
    _flag(g, "--type", choices=["ur3", "ur5", "ur10", "all"])
    _flag(g, "--count", type=int, help="samples per robot type")
    _bool(g, "--paper-analog", help="nine recordings with the reference dataset counts")
    _flag(g, "--resolution", help="WxH, e.g. 64x53")
    _flag(g, "--dataset-dir")
    _flag(g, "--split-ratio", type=float)
    _bool(g, "--stratify")
    _flag(g, "--calibration-sigma", type=float, help="label noise std in metres")
    _flag(g, "--workers", type=int)

    t = sub.add_parser("train", help="train the network")
    _add_globals(t, suppress=True)
    _flag(t, "--dataset-dir")
    _flag(t, "--split-ratio", type=float)
    _bool(t, "--stratify")
    _flag(t, "--batch-size", type=int)
    _flag(t, "--lr-start", type=float)
    _flag(t, "--lr-end", type=float)
    _flag(t, "--iterations", type=int)
    _flag(t, "--optimizer", choices=["sgd", "sgd_momentum"])
    _flag(t, "--momentum", type=float)
    _flag(t, "--checkpoint-every", type=int)
    for w in ("mask", "jcoords", "bcoords", "type"):
        _flag(t, f"--w-{w}", type=float)
    _bool(t, "--paper-eq3-literal", help="mask loss with estimate and ground truth swapped")
    _flag(t, "--class-weights", choices=["image", "dataset"],
          help="mask class weights per image or from the whole training set")
    _bool(t, "--resume")
    _flag(t, "--model-config", help="JSON architecture file")
    _flag(t, "--dtype", choices=["float32", "float64"])

    e = sub.add_parser("eval", help="evaluate a checkpoint and write report files")
    _add_globals(e, suppress=True)
    _flag(e, "--dataset-dir")
    _flag(e, "--checkpoint")
    _flag(e, "--split", choices=["test", "train", "all"])
    _flag(e, "--split-ratio", type=float)
    _bool(e, "--stratify")
    _flag(e, "--threshold", type=float)
    _flag(e, "--report-dir")

    i = sub.add_parser("infer", help="run one image through a checkpoint")
    _add_globals(i, suppress=True)
    _flag(i, "--image")
    _flag(i, "--checkpoint")
    _flag(i, "--camera", help="JSON with fx, fy, cx, cy for projecting joints to pixels")
    _flag(i, "--output", help="output directory")

    c = sub.add_parser("gradcheck", help="finite-difference verification suite")
    _add_globals(c, suppress=True)
    _flag(c, "--tolerance", type=float)
    _flag(c, "--smooth-tolerance", type=float)
    _bool(c, "--skip-model")

    r = sub.add_parser("report", help="re-emit report files from a report.json")
    _add_globals(r, suppress=True)
    _flag(r, "--report-json")
    _flag(r, "--report-dir")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicit flags."""
    command = args.command
    defaults = {**GLOBAL_DEFAULTS, **DEFAULTS[command]}
    from_file = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            from_file = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        # a section named after the subcommand overrides top-level keys
        section = from_file.pop(command, None)
        from_file = {k.replace("-", "_"): v for k, v in from_file.items()
                     if k not in DEFAULTS}
        if isinstance(section, dict):
            from_file.update({k.replace("-", "_"): v for k, v in section.items()})
        known = set(GLOBAL_DEFAULTS).union(*DEFAULTS.values())
        unknown = sorted(set(from_file) - known)
        if unknown:
            raise UsageError(f"unknown settings in config file: {', '.join(unknown)}")
        # settings meant for other subcommands are ignored
        from_file = {k: v for k, v in from_file.items() if k in defaults}
    flags = {k: v for k, v in vars(args).items()
             if k in defaults and v is not None}
    resolved = {**defaults, **from_file, **flags}
    resolved["command"] = command
    return resolved


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _parse_resolution(text) -> tuple[int, int]:
    if isinstance(text, (list, tuple)):
        w, h = text
        return int(w), int(h)
    try:
        w, h = str(text).lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise UsageError(f"resolution must look like 64x53, got {text!r}") from None


def _dataset_dir(cfg) -> Path:
    return Path(cfg["dataset_dir"] or Path(cfg["out_dir"]) / "dataset")


def _checkpoint_dir(cfg) -> Path:
    return Path(cfg.get("checkpoint") or Path(cfg["out_dir"]) / "train")


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(cfg) -> int:
    from .dataset import (GenerationConfig, generate_samples, paper_analog_recordings,
                          save_dataset, split_dataset, type_recordings)
    from .kinematics import ROBOT_TYPES, RobotType

    if cfg["paper_analog"]:
        recordings = paper_analog_recordings()
    else:
        types = ROBOT_TYPES if cfg["type"] == "all" else (RobotType.parse(cfg["type"]),)
        if cfg["count"] < 1:
            raise UsageError("--count must be >= 1")
        recordings = type_recordings(types, cfg["count"])
    gen = GenerationConfig(resolution=_parse_resolution(cfg["resolution"]),
                           calibration_sigma=cfg["calibration_sigma"],
                           params_path=cfg["params"])
    samples, ids = generate_samples(recordings, cfg["seed"], gen, workers=cfg["workers"])
    out = _dataset_dir(cfg)
    manifest = save_dataset(samples, out, cfg["seed"], ids, recordings)
    train, test = split_dataset(manifest, cfg["split_ratio"], cfg["seed"], cfg["stratify"])
    (out / "split.json").write_text(json.dumps(
        {"ratio": cfg["split_ratio"], "seed": cfg["seed"], "stratify": cfg["stratify"],
         "train": [e.index for e in train.entries], "test": [e.index for e in test.entries]}))
    print(f"wrote {len(manifest)} samples to {out}")
    for rec in recordings:
        print(f"  recording {rec.recording}: {rec.robot_type.value} x {rec.count}")
    print(f"  counts {manifest.counts}; split {len(train)} train / {len(test)} test")
    return EXIT_OK


def _load_split(cfg, which):
    """The seeded split is recomputed; split.json written by gen-data is a record only."""
    from .dataset import load_dataset, split_dataset

    manifest = load_dataset(_dataset_dir(cfg))
    if which == "all":
        return manifest
    train, test = split_dataset(manifest, cfg["split_ratio"], cfg["seed"], cfg["stratify"])
    return train if which == "train" else test


def cmd_train(cfg) -> int:
    import numpy as np

    from .dataset import load_arrays
    from .losses import LossWeights
    from .model import ModelConfig, build_model
    from .trainer import TrainConfig, train

    train_m = _load_split(cfg, "train")
    test_m = _load_split(cfg, "test")
    if cfg["model_config"]:
        mconf = ModelConfig.load(cfg["model_config"])
    else:
        mconf = ModelConfig(resolution=tuple(train_m.resolution))
    tconf = TrainConfig(batch_size=cfg["batch_size"], lr_start=cfg["lr_start"],
                        lr_end=cfg["lr_end"], total_iterations=cfg["iterations"],
                        seed=cfg["seed"], optimizer=cfg["optimizer"], momentum=cfg["momentum"],
                        checkpoint_every=cfg["checkpoint_every"],
                        weights=LossWeights(cfg["w_mask"], cfg["w_jcoords"], cfg["w_bcoords"],
                                            cfg["w_type"]),
                        literal_mask_loss=cfg["paper_eq3_literal"],
                        class_weighting=cfg["class_weights"])
    train_set = load_arrays(train_m, mconf.resolution)
    test_set = load_arrays(test_m, mconf.resolution)
    model = build_model(mconf, seed=cfg["seed"], dtype=np.dtype(cfg["dtype"]))
    out = _checkpoint_dir(cfg)
    print(f"training on {len(train_set)} samples, testing on {len(test_set)}; "
          f"{model.parameter_count} parameters; checkpoints in {out}")

    def progress(rec):
        if rec.test_l_final is not None:
            print(f"iter {rec.iteration:6d}  lr {rec.lr:.3e}  loss {rec.l_final:.4f}  "
                  f"test {rec.test_l_final:.4f}", flush=True)

    _, log = train(model, train_set, test_set, tconf, out_dir=out, resume=cfg["resume"],
                   progress=progress)
    print(f"done: {len(log)} iterations, final train loss {log.records[-1].l_final:.4f}")
    return EXIT_OK


def cmd_eval(cfg) -> int:
    from .dataset import load_arrays
    from .evaluation import emit_report, evaluate_model
    from .trainer import LOG_FILE, TrainLog, load_model

    ckpt = _checkpoint_dir(cfg)
    model = load_model(ckpt)
    data = load_arrays(_load_split(cfg, cfg["split"]), model.config.resolution)
    if len(data) == 0:
        raise UsageError(f"the {cfg['split']} split is empty")
    train_log = TrainLog.read_csv(ckpt / LOG_FILE) if (ckpt / LOG_FILE).exists() else None
    report = evaluate_model(model, data, cfg["threshold"], train_log)
    out = Path(cfg["report_dir"] or Path(cfg["out_dir"]) / "report")
    emit_report(report, out)
    print(f"mask accuracy {report.mask_accuracy:.4f} (majority baseline "
          f"{report.majority_baseline:.4f}); type accuracy {report.type_accuracy:.4f}; "
          f"joint error {report.joint_error_mean:.2f} cm; base error "
          f"{report.base_error_mean:.2f} cm")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_infer(cfg) -> int:
    import numpy as np
    from PIL import Image

    from .dataset import DatasetError, resize_arrays, read_image
    from .evaluation import predicted_types
    from .kinematics import ROBOT_TYPES
    from .scene import CameraModel, project_points
    from .trainer import load_model

    if not cfg["image"]:
        raise UsageError("infer needs --image")
    image_path = Path(cfg["image"])
    if not image_path.exists():
        raise DatasetError(f"image not found: {image_path}")
    model = load_model(_checkpoint_dir(cfg))
    image = read_image(image_path)
    H_in, W_in = image.shape[:2]
    mw, mh = model.config.resolution
    small, _, _ = resize_arrays(image, np.zeros((H_in, W_in), np.uint8), None, (mw, mh))
    out = model.forward(np.ascontiguousarray(small.transpose(2, 0, 1)[None], model.dtype))
    mask = (out.mask_prob[0] >= 0.5).astype(np.uint8) * 255
    mask_img = Image.fromarray(mask).resize((W_in, H_in), Image.NEAREST)

    if cfg["camera"]:
        cam = json.loads(Path(cfg["camera"]).read_text())
        camera = CameraModel(cam["fx"], cam["fy"], cam["cx"], cam["cy"], W_in, H_in)
    else:
        camera = CameraModel.default(W_in, H_in)
    joints = out.joints[0].reshape(6, 3).astype(float)
    base = out.base[0].astype(float)
    px = project_points(camera, joints)
    base_px = project_points(camera, base[None])[0]
    t = int(predicted_types(out.type_prob)[0])
    result = {
        "image": str(image_path),
        "robot_type": ROBOT_TYPES[t].value,
        "type_prob": [float(v) for v in out.type_prob[0]],
        "base_xyz": [float(v) for v in base],
        "joints_xyz": [[float(v) for v in row] for row in joints],
        "base_px": [None if not np.isfinite(v) else float(v) for v in base_px],
        "joints_px": [[None if not np.isfinite(v) else float(v) for v in row] for row in px],
        "camera": {"fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy},
    }
    out_dir = Path(cfg["output"] or Path(cfg["out_dir"]) / "infer")
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_img.save(out_dir / f"{image_path.stem}_mask.png")
    (out_dir / f"{image_path.stem}_pred.json").write_text(json.dumps(result, indent=2))
    print(f"predicted {result['robot_type']}; wrote mask and coordinates to {out_dir}")
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    from . import gradsuite

    results = gradsuite.run_suite(cfg["seed"], include_model=not cfg["skip_model"])
    failed = 0
    for r in results:
        tol = cfg["smooth_tolerance"] if r.tolerance == gradsuite.SMOOTH_TOL else cfg["tolerance"]
        ok = r.max_error < tol
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {r.name:28s} max rel err {r.max_error:.2e} "
              f"(tol {tol:.0e}, worst block {r.worst_block})")
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_report(cfg) -> int:
    from .evaluation import emit_report, load_report, report_markdown

    src = Path(cfg["report_json"] or Path(cfg["out_dir"]) / "report" / "report.json")
    if not src.exists():
        raise FileNotFoundError(f"report not found: {src}")
    report = load_report(src)
    out = Path(cfg["report_dir"] or src.parent)
    emit_report(report, out)
    print(report_markdown(report))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "gradcheck": cmd_gradcheck, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        cfg = resolve(args)
    except UsageError as exc:
        print(f"armsight: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _set_threads(cfg["threads"])
    print("resolved config: " + json.dumps(cfg, sort_keys=True), flush=True)

    from .checkpoint import CheckpointError
    from .dataset import DatasetError, GenerationError
    from .nn import NonFiniteError, ShapeError

    try:
        return COMMANDS[cfg["command"]](cfg)
    except UsageError as exc:
        print(f"armsight: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"armsight: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, GenerationError, CheckpointError, ShapeError, OSError) as exc:
        print(f"armsight: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"armsight: invalid setting: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
