"""Command-line surface.

Subcommands: make-dataset, train, render, eval, calibrate-crf, export-crf.
Exit codes: 0 success, 1 usage error, 2 runtime error. All randomized
commands accept --seed and reproduce bit-identically under it.
"""

import argparse
import json
import sys

import numpy as np

from . import calib, metrics, synth
from . import io as hio
from . import train as htrain
from .errors import HdrfError, InputError
from .model import load_checkpoint, mapper_curve
from .render import CameraView, render_image
from .util import atomic_write_text

CURVE_HEADER = "log_exposure,red,green,blue"


def _curve_csv(table) -> str:
    lines = [CURVE_HEADER]
    for row in table:
        lines.append(",".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdrf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate a synthetic multi-exposure dataset")
    p.add_argument("--scene", help="scene spec JSON (defaults to the built-in scene)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64, help="image width/height")
    p.add_argument("--poses", type=int, default=35)
    p.add_argument("--gamma", type=float, default=2.2, help="ground-truth response gamma")
    p.add_argument("--gain", type=float, default=0.5 ** 2.2, help="ground-truth response gain")
    p.add_argument("--exposure-times", default=None,
                   help="comma-separated seconds (default 1/64,1/16,1/4,1,4)")
    p.add_argument("--train-levels", default="0,2,4",
                   help="comma-separated indices into the exposure list used for training")
    p.add_argument("--gt-samples", type=int, default=256)

    p = sub.add_parser("train", help="optimize a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint/history directory")
    p.add_argument("--config", help="JSON file mirroring the train config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-rays", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-u", type=float)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("render", help="render a view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pose", required=True,
                   help="view index into the checkpoint's stored views, or a JSON file "
                        "with {\"c2w\": [16 floats], \"exposure_time_s\": optional}")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--exposure", type=float, help="exposure time in seconds (LDR)")
    group.add_argument("--hdr", action="store_true", help="render linear HDR instead")
    p.add_argument("--out", required=True, help=".png for LDR, .pfm for HDR")

    p = sub.add_parser("eval", help="score a checkpoint against a dataset's test views")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")

    p = sub.add_parser("calibrate-crf", help="classical response recovery from a dataset pose")
    p.add_argument("--data", required=True)
    p.add_argument("--pose", type=int, required=True, help="view index selecting the pose")
    p.add_argument("--out", required=True, help="curve CSV path")
    p.add_argument("--smoothness", type=float, default=50.0)
    p.add_argument("--sites", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-crf", help="export the learned response curve")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="curve CSV path")
    p.add_argument("--min-log-exposure", type=float, default=-8.0)
    p.add_argument("--max-log-exposure", type=float, default=8.0)
    p.add_argument("--points", type=int, default=513)
    return parser


def _cmd_make_dataset(args) -> int:
    if args.scene:
        with open(args.scene, "r", encoding="utf-8") as fh:
            scene = synth.SceneSpec.from_dict(json.load(fh))
    else:
        scene = synth.default_scene()
    exposures = (
        tuple(float(t) for t in args.exposure_times.split(","))
        if args.exposure_times
        else synth.DEFAULT_EXPOSURES
    )
    levels = tuple(int(i) for i in args.train_levels.split(","))
    crf = synth.GroundTruthCrf(gamma=args.gamma, gain=args.gain)
    dataset = synth.make_dataset(
        scene, crf, args.out, n_poses=args.poses, exposure_times=exposures,
        image_size=args.size, seed=args.seed, train_exposure_indices=levels,
        gt_samples=args.gt_samples,
    )
    for w in dataset.meta.get("warnings", []):
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {len(dataset.views)} views to {args.out}")
    return 0


def _cmd_train(args) -> int:
    dataset = hio.load_dataset(args.data)
    cfg = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    for key, value in (
        ("iterations", args.iterations),
        ("batch_rays", args.batch_rays),
        ("seed", args.seed),
        ("lambda_u", args.lambda_u),
    ):
        if value is not None:
            cfg[key] = value
    config = htrain.TrainConfig.from_dict(cfg)

    def progress(report):
        print(
            f"step {report.step:6d}  lr {report.lr:.3e}  total {report.total:.6f}  "
            f"coarse {report.coarse:.6f}  fine {report.fine:.6f}  unit {report.unit:.6f}",
            flush=True,
        )

    result = htrain.train(dataset, config, out_dir=args.out,
                          progress=None if args.quiet else progress)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"history:    {result.history_path}")
    return 0


def _resolve_pose(args, extra) -> tuple[CameraView, float | None]:
    meta = extra.get("dataset_meta", {})
    intr = meta.get("intrinsics")
    if intr is None:
        raise InputError("checkpoint carries no camera intrinsics")
    try:
        index = int(args.pose)
        views = meta.get("views", [])
        if not 0 <= index < len(views):
            raise InputError(f"pose index {index} out of range (checkpoint stores {len(views)} views)")
        entry = views[index]
        c2w = np.asarray(entry["c2w"], dtype=np.float64).reshape(4, 4)
        dt = float(entry["exposure_time_s"])
    except ValueError:
        with open(args.pose, "r", encoding="utf-8") as fh:
            entry = json.load(fh)
        c2w = np.asarray(entry["c2w"], dtype=np.float64).reshape(4, 4)
        dt = float(entry["exposure_time_s"]) if "exposure_time_s" in entry else None
    view = CameraView.from_c2w(
        c2w, intr["fx"], intr["fy"], intr["cx"], intr["cy"],
        int(intr["width"]), int(intr["height"]), dt if dt else 1.0,
    )
    return view, dt


def _cmd_render(args) -> int:
    bundle, extra = load_checkpoint(args.ckpt)
    view, pose_dt = _resolve_pose(args, extra)
    meta = extra["dataset_meta"]
    near, far = float(meta["near"]), float(meta["far"])
    cfg = extra.get("train_config", {})
    n_coarse = int(cfg.get("n_coarse", 32))
    n_importance = int(cfg.get("n_importance", 32))
    if args.hdr:
        image = render_image(view, bundle, near, far, mode="hdr",
                             n_coarse=n_coarse, n_importance=n_importance)
        hio.write_pfm(args.out, image)
    else:
        dt = args.exposure if args.exposure is not None else pose_dt
        image = render_image(view, bundle, near, far, mode="ldr", dt=dt,
                             n_coarse=n_coarse, n_importance=n_importance)
        hio.write_png(args.out, image)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    bundle, extra = load_checkpoint(args.ckpt)
    dataset = hio.load_dataset(args.data)
    cfg = extra.get("train_config", {})
    result = metrics.evaluate(
        bundle, dataset,
        n_coarse=int(cfg.get("n_coarse", 32)),
        n_importance=int(cfg.get("n_importance", 32)),
    )
    atomic_write_text(args.out, result.csv())
    for split, metric, value in result.rows:
        print(f"{split:14s} {metric:5s} {value:.4f}")
    for note in result.notes:
        print(f"note: {note}", file=sys.stderr)
    return 0


def _cmd_calibrate_crf(args) -> int:
    dataset = hio.load_dataset(args.data)
    if not 0 <= args.pose < len(dataset.views):
        raise InputError(f"pose index {args.pose} out of range ({len(dataset.views)} views)")
    anchor = dataset.views[args.pose]
    same_pose = [
        v for v in dataset.views
        if np.array_equal(v.camera.c2w, anchor.camera.c2w)
    ]
    same_pose.sort(key=lambda v: v.camera.exposure_time_s)
    images = np.stack([np.rint(dataset.load_image(v) * 255.0).astype(np.uint8) for v in same_pose])
    times = [v.camera.exposure_time_s for v in same_pose]
    rng = np.random.default_rng(args.seed)
    rows, cols = calib.sample_sites(images, args.sites, rng)
    stack = calib.build_stack(images, times, rows, cols)
    crf = calib.solve_crf(stack, smoothness=args.smoothness)
    lo = float(crf.log_exposure.min())
    hi = float(crf.log_exposure.max())
    table = crf.as_table(np.linspace(lo, hi, 513))
    atomic_write_text(args.out, _curve_csv(table))
    print(f"wrote {args.out} ({len(same_pose)} exposures at pose of view {args.pose})")
    return 0


def _cmd_export_crf(args) -> int:
    bundle, _ = load_checkpoint(args.ckpt)
    grid = np.linspace(args.min_log_exposure, args.max_log_exposure, args.points)
    table = mapper_curve(bundle.tone_mapper, grid)
    atomic_write_text(args.out, _curve_csv(table))
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "make-dataset": _cmd_make_dataset,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "calibrate-crf": _cmd_calibrate_crf,
    "export-crf": _cmd_export_crf,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage problems; remap the latter
        return 0 if exc.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except (HdrfError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
