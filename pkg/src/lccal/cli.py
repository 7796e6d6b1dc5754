"""Command-line front end.

Subcommands: ``render-depth``, ``perturb``, ``train``, ``calibrate``,
``evaluate`` and ``selftest``. Every output records the package version, the
seed and a hash of the resolved configuration; ``LCCAL_LOG`` sets the log
level (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import LccalError
from .geometry import Transform
from .io.frame import Frame
from .io.kitti import KittiDataset, TEST_SEQUENCES, TRAIN_SEQUENCES, read_velodyne_bin
from .io.synthetic import scene_dataset
from .model import ModelConfig, build_model
from .perturb import RangeSpec, derive_seed, make_initial_extrinsic, sample_deviation, write_deviations_csv
from .pipeline.cascade import CascadeConfig, OracleStage, refine_cascade
from .pipeline.filtering import sliding_filter
from .pipeline.metrics import evaluate, write_error_csv
from .pipeline.training import TrainOptions, config_hash, train_range
from .projection import CameraIntrinsics, render_depth, save_depth_pgm, save_depth_png
from .selftest import run_selftest

log = logging.getLogger("lccal")


class UsageError(LccalError):
    pass


def _meta(args: argparse.Namespace, **extra) -> dict:
    """Resolved config of this invocation plus its hash, seed and version."""
    doc = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "jobs")}
    doc.update(extra)
    return {"version": __version__, "seed": args.seed, "config_hash": config_hash(doc)}


def _read_transform(text_or_path: str) -> Transform:
    p = Path(text_or_path)
    text = p.read_text() if p.is_file() else text_or_path
    return Transform.from_text(text.replace(",", " "))


def _parse_intrinsics(text: str) -> CameraIntrinsics:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 6:
        raise UsageError(f"--intrinsics needs fx,fy,cx,cy,width,height; got {text!r}")
    return CameraIntrinsics(*vals[:4], int(vals[4]), int(vals[5]))


def _require_file(path: Optional[str], flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{flag}: no such file or directory: {p}")
    return p


def _load_frames(args, width: int, height: int, sequences: Sequence[str]) -> List[Frame]:
    if args.mode == "synthetic":
        return scene_dataset(args.scenes, args.seed)
    root = _require_file(args.data_root, "--data-root")
    indices = None
    if args.frames:
        lo, _, hi = args.frames.partition(":")
        indices = range(int(lo), int(hi or lo) + 1)
    ds = KittiDataset(root, sequences, width, height, indices)
    return [ds[i] for i in range(len(ds))]


# ----------------------------------------------------------------------------- render-depth

def cmd_render_depth(args) -> int:
    if args.mode == "kitti" or args.velodyne:
        if args.velodyne:
            cloud = read_velodyne_bin(_require_file(args.velodyne, "--velodyne"))
            if not args.intrinsics:
                raise UsageError("--intrinsics is required with --velodyne")
            k = _parse_intrinsics(args.intrinsics)
            extrinsic = _read_transform(args.extrinsic) if args.extrinsic else Transform.identity()
        else:
            seq = args.sequence or TEST_SEQUENCES[0]
            idx = int(args.frames or 0)
            ds = KittiDataset(_require_file(args.data_root, "--data-root"), [seq], 1242, 375, [idx])
            frame = ds[0]
            cloud, k = frame.cloud, frame.intrinsics
            extrinsic = _read_transform(args.extrinsic) if args.extrinsic else frame.T_LC
    else:
        frame = scene_dataset(1, args.seed)[0]
        cloud, k = frame.cloud, frame.intrinsics
        extrinsic = _read_transform(args.extrinsic) if args.extrinsic else frame.T_LC
    if args.range:
        dev = sample_deviation(RangeSpec.parse(args.range), derive_seed(args.seed, 0))
        extrinsic = make_initial_extrinsic(extrinsic, dev.delta)
    depth = render_depth(cloud, extrinsic, k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() in (".pgm", ".ppm"):
        save_depth_pgm(out, depth)
        Path(str(out) + ".json").write_text(json.dumps(_meta(args), indent=2))
    else:
        save_depth_png(out, depth, _meta(args))
    log.info("wrote %s (%d of %d pixels filled)", out, np.count_nonzero(depth), depth.size)
    return 0


# ----------------------------------------------------------------------------- perturb

def cmd_perturb(args) -> int:
    rng_range = RangeSpec.parse(args.range or "1.5:20")
    samples = [sample_deviation(rng_range, derive_seed(args.seed, i)) for i in range(args.count)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_deviations_csv(out, samples, {**_meta(args), "range": str(rng_range)})
    return 0


# ----------------------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg = ModelConfig(height=args.height, width=args.width, max_depth=args.max_depth, seed=args.seed)
    frames = _load_frames(args, cfg.width, cfg.height, args.sequences or TRAIN_SEQUENCES)
    rng_range = RangeSpec.parse(args.range or "1.5:20")
    opts = TrainOptions(steps=args.steps, batch_size=args.batch_size, lr=args.lr, lr_schedule=args.lr_schedule,
                        lr_min=args.lr * 0.05 if args.lr_schedule == "cosine" else 0.0, seed=args.seed,
                        init_checkpoint=args.init, out_dir=args.out)
    if args.init:
        _require_file(args.init, "--init")
    res = train_range(frames, rng_range, build_model(cfg), opts)
    log.info("trained %d steps in %.1f s; final loss %.5f", args.steps, res.seconds,
             res.losses[-1]["L"] if res.losses else float("nan"))
    return 0


# ----------------------------------------------------------------------------- calibrate

def _calibrate_one(job):
    frame, T_init, stages, oracle_noise, seed = job
    if stages is None:
        noise = None
        if oracle_noise:
            noise = (*oracle_noise, np.random.default_rng(seed))
        stages = [OracleStage(frame.T_LC, noise)]
    return refine_cascade(frame.image, frame.cloud, T_init, stages, frame.intrinsics)


def _map(fn, jobs, n_workers: int):
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as ex:
        return list(ex.map(fn, jobs))


def cmd_calibrate(args) -> int:
    if args.oracle:
        stages, width, height = None, args.width, args.height
    else:
        cascade = CascadeConfig.load(_require_file(args.cascade, "--cascade"))
        stages = cascade.predictors()
        width, height = stages[0].model.cfg.width, stages[0].model.cfg.height
    frames = _load_frames(args, width, height, [args.sequence] if args.sequence else TEST_SEQUENCES)
    if not frames:
        raise UsageError("no frames to calibrate")
    rng_range = RangeSpec.parse(args.range or "1.5:20")
    if args.init:
        T_inits = [_read_transform(args.init)] * len(frames)
        dev_seeds = [None] * len(frames)
    elif args.fixed_deviation:
        dev = sample_deviation(rng_range, derive_seed(args.seed, 0))
        T_inits = [make_initial_extrinsic(f.T_LC, dev.delta) for f in frames]
        dev_seeds = [dev.seed] * len(frames)
    else:
        devs = [sample_deviation(rng_range, derive_seed(args.seed, i)) for i in range(len(frames))]
        T_inits = [make_initial_extrinsic(f.T_LC, d.delta) for f, d in zip(frames, devs)]
        dev_seeds = [d.seed for d in devs]
    noise = None
    if args.oracle_noise:
        sigma_t, _, sigma_r = args.oracle_noise.partition(":")
        noise = (float(sigma_t), np.radians(float(sigma_r or 0.0)))
    jobs = [(f, Ti, stages, noise, derive_seed(args.seed, 1, i)) for i, (f, Ti) in enumerate(zip(frames, T_inits))]
    estimates = _map(_calibrate_one, jobs, args.jobs)
    doc = {**_meta(args), "frames": []}
    filtered = sliding_filter(estimates, args.window) if args.window else None
    for i, (f, est) in enumerate(zip(frames, estimates)):
        entry = {"name": f.name, "deviation_seed": dev_seeds[i], "T_LC_gt": f.T_LC.to_text(), **est.to_dict()}
        if filtered is not None:
            entry["T_LC_filtered"] = filtered[i].to_text()
        doc["frames"].append(entry)
    _write_json(args.out, doc)
    return 0


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2))
    os.replace(tmp, path)


# ----------------------------------------------------------------------------- evaluate

def _evaluate_pair(pair):
    return evaluate(*pair)


def cmd_evaluate(args) -> int:
    if args.estimates:
        doc = json.loads(_require_file(args.estimates, "--estimates").read_text())
        key = "T_LC_filtered" if args.filtered else "T_LC_hat"
        try:
            pairs = [(Transform.from_text(f[key]), Transform.from_text(f["T_LC_gt"])) for f in doc["frames"]]
        except KeyError as exc:
            raise UsageError(f"{args.estimates}: frames lack {exc}") from exc
        source = {"estimates_config_hash": doc.get("config_hash"), "estimates_seed": doc.get("seed")}
    elif args.pred and args.gt:
        pred = _require_file(args.pred, "--pred").read_text().strip().splitlines()
        gt = _require_file(args.gt, "--gt").read_text().strip().splitlines()
        if len(pred) != len(gt):
            raise UsageError(f"--pred has {len(pred)} transforms but --gt has {len(gt)}")
        pairs = [(Transform.from_text(p), Transform.from_text(g)) for p, g in zip(pred, gt)]
        source = {}
    else:
        raise UsageError("evaluate needs --estimates, or both --pred and --gt")
    if not pairs:
        raise UsageError("nothing to evaluate")
    reports = _map(_evaluate_pair, pairs, args.jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_error_csv(out, reports, {**_meta(args), **source, "frames": len(reports)}, per_frame=args.per_frame)
    return 0


# ----------------------------------------------------------------------------- selftest

def cmd_selftest(args) -> int:
    results = run_selftest(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail} ({r.seconds:.2f} s)")
    return 0 if all(r.passed for r in results) else 1


# ----------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lccal", description="LiDAR-camera extrinsic self-calibration toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-frame work")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--mode", choices=("kitti", "synthetic"), default="synthetic")
    data.add_argument("--data-root", help="KITTI odometry root (contains sequences/)")
    data.add_argument("--sequence", help="KITTI sequence id, e.g. 00")
    data.add_argument("--frames", help="KITTI frame index or inclusive range A:B")
    data.add_argument("--scenes", type=int, default=50, help="synthetic scene count")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render-depth", parents=[common, data], help="write a sparse depth image")
    p.add_argument("--velodyne", help="velodyne .bin file (with --intrinsics)")
    p.add_argument("--intrinsics", help="fx,fy,cx,cy,width,height")
    p.add_argument("--extrinsic", help="12 row-major [R|t] values, or a file holding them")
    p.add_argument("--range", help="apply a sampled deviation t_m:r_deg")
    p.add_argument("--out", required=True, help=".png (16-bit depth) or .pgm (8-bit preview)")
    p.set_defaults(func=cmd_render_depth)

    p = sub.add_parser("perturb", parents=[common], help="sample deviations to CSV")
    p.add_argument("--range", help="t_m:r_deg (default 1.5:20)")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("train", parents=[common, data], help="train one range model")
    p.add_argument("--range", help="t_m:r_deg (default 1.5:20)")
    p.add_argument("--sequences", nargs="*", help="KITTI training sequences (default 01-20)")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--max-depth", type=float, default=80.0)
    p.add_argument("--init", help="warm-start checkpoint")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", parents=[common, data], help="run the refinement cascade")
    p.add_argument("--cascade", help="cascade JSON (stages with ranges and checkpoints)")
    p.add_argument("--oracle", action="store_true", help="test mode: stages predict the exact deviation")
    p.add_argument("--oracle-noise", help="sigma_t_m:sigma_r_deg noise for --oracle")
    p.add_argument("--range", help="deviation range t_m:r_deg for the initial extrinsic (default 1.5:20)")
    p.add_argument("--fixed-deviation", action="store_true", help="one deviation for every frame")
    p.add_argument("--init", help="initial extrinsic for every frame instead of a sampled deviation")
    p.add_argument("--window", type=int, default=0, help="temporal median window (0 = off)")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--out", required=True, help="estimates JSON")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", parents=[common], help="error table CSV")
    p.add_argument("--estimates", help="JSON written by calibrate")
    p.add_argument("--filtered", action="store_true", help="score the temporally filtered estimates")
    p.add_argument("--pred", help="text file, one 12-value transform per line")
    p.add_argument("--gt", help="text file, one 12-value transform per line")
    p.add_argument("--per-frame", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", parents=[common], help="run the built-in oracle checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("LCCAL_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (LccalError, OSError, ValueError) as exc:
        print(f"lccal {args.command}: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
