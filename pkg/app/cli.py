"""Command-line entry points: run, render, verify, eval and export."""

import argparse
import logging
from pathlib import Path
from typing import List, Optional, Sequence

from app.checkpoint import export_ply, load_checkpoint
from app.config import load_config
from app.dataset_io import associate, read_tum_trajectory
from app.errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    EvaluationError,
    InvalidArgumentError,
    SlamError,
)
from app.evaluation import ate_rmse, psnr, write_metrics
from app.image_io import write_color, write_depth
from app.pipeline import open_sequence, run_slam
from app.rasterizer import render
from app.startup import startup
from app.verification import DEFAULT_SEEDS, SUITES, run_verification

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

INPUT_ERRORS = (ConfigError, DatasetError, CheckpointError, EvaluationError, InvalidArgumentError)


def _overrides(args: argparse.Namespace) -> List[str]:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    if getattr(args, "out", None) is not None:
        overrides.append(f"output_dir={args.out}")
    return overrides


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    startup(config.threads)
    result = run_slam(config)
    logger.info(f"Run finished: {len(result.poses)} poses written to {result.output_dir / 'trajectory.txt'}")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    """Render a saved map at every pose of a trajectory file; with --config, compare against the dataset frames."""
    cloud, iteration = load_checkpoint(args.checkpoint)
    timestamps, poses = read_tum_trajectory(args.poses)
    if not poses:
        logger.info(f"{args.poses} lists no poses; nothing to render")
        return EXIT_OK

    config = load_config(args.config, _overrides(args))
    startup(config.threads)
    sequence = open_sequence(config) if args.config is not None else None
    intrinsics = sequence.intrinsics if sequence is not None else config.intrinsics
    matches = {}
    if sequence is not None:
        frame_times = sequence.ground_truth()[0]
        matches = dict(associate(timestamps, frame_times))

    out = Path(args.out or config.output_dir)
    scores = []
    for k, pose in enumerate(poses):
        output, _ = render(cloud, pose, intrinsics, None, config.raster)
        write_color(out / f"{k:06d}_color.png", output.color)
        write_depth(out / f"{k:06d}_depth.png", output.alpha_depth)
        if k in matches:
            frame = sequence.load_frame(matches[k])
            scores.append(psnr(output.color, frame.color))
            logger.info(f"Pose {k} (frame {frame.index}): PSNR {scores[-1]:.2f} dB")
    logger.info(f"Rendered {len(poses)} views of a {len(cloud)}-primitive map (iteration {iteration}) to {out}")
    if scores:
        write_metrics({"views": len(poses), "compared": len(scores), "psnr": sum(scores) / len(scores)}, out)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    startup(args.threads or 1)
    results = run_verification(args.suite, args.seeds)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def cmd_eval(args: argparse.Namespace) -> int:
    est_times, est_poses = read_tum_trajectory(args.trajectory)
    gt_times, gt_poses = read_tum_trajectory(args.groundtruth)
    ate = ate_rmse(est_times, est_poses, gt_times, gt_poses, args.tolerance)
    logger.info(f"ATE RMSE: {ate:.4f} cm over {len(est_poses)} estimated poses")
    if args.out is not None:
        write_metrics({"ate_rmse_cm": ate}, Path(args.out))
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    cloud, _ = load_checkpoint(args.checkpoint)
    export_ply(cloud, args.out)
    return EXIT_OK


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--out", type=Path, default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splat-slam", description="Gaussian splatting RGB-D SLAM")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run SLAM on the configured sequence")
    _add_config_flags(run)
    run.set_defaults(handler=cmd_run)

    rend = commands.add_parser("render", help="re-render a saved map at the poses of a trajectory file")
    rend.add_argument("checkpoint", type=Path)
    rend.add_argument("poses", type=Path, help="TUM-format trajectory")
    _add_config_flags(rend)
    rend.set_defaults(handler=cmd_render)

    verify = commands.add_parser("verify", help="run the gradient, oracle and property suites")
    verify.add_argument("suite", nargs="?", default="all", help=f"one of {sorted(SUITES)} or 'all'")
    verify.add_argument("--seeds", type=int, default=DEFAULT_SEEDS)
    verify.add_argument("--threads", type=int, default=None)
    verify.set_defaults(handler=cmd_verify)

    ev = commands.add_parser("eval", help="ATE RMSE of a trajectory against ground truth")
    ev.add_argument("trajectory", type=Path)
    ev.add_argument("groundtruth", type=Path)
    ev.add_argument("--tolerance", type=float, default=0.02)
    ev.add_argument("--out", type=Path, default=None)
    ev.set_defaults(handler=cmd_eval)

    export = commands.add_parser("export", help="write a checkpoint as a PLY point cloud")
    export.add_argument("checkpoint", type=Path)
    export.add_argument("out", type=Path)
    export.set_defaults(handler=cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 after --help
        logger.debug(f"Argument parsing ended with exit code {e.code}")
        return EXIT_USAGE if e.code else EXIT_OK

    try:
        return args.handler(args)
    except INPUT_ERRORS as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except SlamError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE
