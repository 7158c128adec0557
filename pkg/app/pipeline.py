"""The alternating SLAM scheduler: track every frame, and on keyframes map, bundle-adjust and grow the map."""

import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from app.checkpoint import export_ply, save_checkpoint
from app.config import dump_config
from app.dataset_io import DirectorySequence, Frame, FrameSequence, TumSequence, write_tum_trajectory
from app.errors import EvaluationError
from app.evaluation import ate_rmse, chamfer_to_surface, cull_unobserved, depth_l1, psnr, recon_metrics, write_metrics
from app.geometry import CameraPose
from app.image_io import dump_render
from app.mapper import MapState, initialize_map, map_step, spawn_gaussians, uncertainty_records
from app.models import RunConfig
from app.rasterizer import render
from app.synthetic import SyntheticSequence, generate_synthetic_sequence
from app.tracker import (
    KeyframeRecord,
    compute_descriptor,
    is_keyframe,
    predict_pose,
    select_window,
    sliding_ba,
    track_frame,
)
from app.uncertainty import run_cycle

logger = logging.getLogger(__name__)

PACKAGE_NAME = "splat-slam"
LIGHT_SCALE = 0.5
SURFACE_SAMPLES = 20000


def open_sequence(config: RunConfig) -> FrameSequence:
    """Frame source named by the dataset section; light mode halves the working resolution."""
    dataset = config.dataset
    scale = LIGHT_SCALE if config.light else 1.0
    if dataset.format == "synthetic":
        return generate_synthetic_sequence(
            dataset.synthetic,
            config.intrinsics,
            seed=config.seed,
            raster=config.raster,
            sh_degree=config.mapping.sh_degree,
            scale=scale,
            max_frames=dataset.max_frames,
        )
    if dataset.format == "tum":
        return TumSequence(dataset.path, config.intrinsics, scale, dataset.max_frames)
    return DirectorySequence(dataset.path, config.intrinsics, scale, dataset.max_frames)


def version_stamp() -> str:
    try:
        package = version(PACKAGE_NAME)
    except PackageNotFoundError:
        logger.debug(f"{PACKAGE_NAME} is not installed as a distribution")
        package = "unknown"
    try:
        revision = subprocess.run(
            ["git", "describe", "--always", "--dirty"], capture_output=True, text=True, check=True, timeout=5
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError) as e:
        logger.debug(f"No git revision available: {e}")
        revision = "unknown"
    return f"{PACKAGE_NAME} {package} ({revision or 'unknown'})"


@dataclass
class FrameTiming:
    frame: int
    keyframe: bool
    tracking_loss: float
    tracking_iterations: int
    tracking_ms: float
    mapping_iterations: int
    mapping_ms: float
    primitives: int
    map_bytes: int = 0
    degraded: bool = False

    @property
    def tracking_ms_per_iteration(self) -> float:
        return self.tracking_ms / self.tracking_iterations if self.tracking_iterations else 0.0

    @property
    def mapping_ms_per_iteration(self) -> float:
        return self.mapping_ms / self.mapping_iterations if self.mapping_iterations else 0.0


@dataclass
class RunResult:
    timestamps: List[float]
    poses: List[CameraPose]
    metrics: Dict[str, object]
    state: MapState
    output_dir: Path
    timings: List[FrameTiming] = field(default_factory=list)


class SlamPipeline:
    """Single-threaded scheduler over a frame sequence.

    Call `process` with every frame in order and `finish` once; `run` does both. All run
    artifacts go below `config.output_dir`.
    """

    def __init__(self, config: RunConfig, sequence: FrameSequence):
        self.config = config
        self.sequence = sequence
        self.intrinsics = sequence.intrinsics
        self.output_dir = Path(config.output_dir)
        self.state: Optional[MapState] = None
        self.keyframes: List[KeyframeRecord] = []
        self.timestamps: List[float] = []
        self.poses: List[CameraPose] = []
        self.timings: List[FrameTiming] = []
        self._keyframe_count = 0

    def prepare(self) -> None:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        dump_config(self.config, self.output_dir / "config.yaml")
        (self.output_dir / "VERSION").write_text(version_stamp() + "\n")
        (self.output_dir / "timing.jsonl").write_text("")
        if isinstance(self.sequence, SyntheticSequence):
            save_checkpoint(self.sequence.gt_cloud, 0, self.output_dir / "gt_map.ckpt")

    def run(self) -> RunResult:
        self.prepare()
        for frame in self.sequence:
            self.process(frame)
        return self.finish()

    def _keyframe_by_id(self) -> Dict[int, KeyframeRecord]:
        return {kf.frame_id: kf for kf in self.keyframes}

    def _initialize(self, frame: Frame) -> FrameTiming:
        cfg = self.config
        # the first pose fixes the gauge; ground truth keeps the map in the evaluation frame
        pose = frame.gt_pose if frame.gt_pose is not None else CameraPose.identity()
        start = time.perf_counter()
        self.state = initialize_map(
            frame, pose, self.intrinsics, cfg.mapping, cfg.weights, cfg.raster, seed=cfg.seed
        )
        elapsed = (time.perf_counter() - start) * 1000.0
        self._insert_keyframe(frame, pose)
        self.poses.append(pose)
        return FrameTiming(
            frame=frame.index,
            keyframe=True,
            tracking_loss=0.0,
            tracking_iterations=0,
            tracking_ms=0.0,
            mapping_iterations=cfg.mapping.init_iterations,
            mapping_ms=elapsed,
            primitives=len(self.state.cloud),
            map_bytes=self.state.cloud.nbytes,
        )

    def _insert_keyframe(self, frame: Frame, pose: CameraPose) -> KeyframeRecord:
        record = KeyframeRecord(frame.index, frame, pose, compute_descriptor(frame.color, self.config.tracker))
        self.keyframes.append(record)
        return record

    def _map_keyframe(self, frame: Frame, pose: CameraPose) -> int:
        """Keyframe work after tracking; returns the number of mapping iterations run."""
        cfg = self.config
        state = self.state
        current = self._insert_keyframe(frame, pose)
        ids = select_window(self.keyframes, frame.index, current.descriptor, cfg.tracker)
        by_id = self._keyframe_by_id()
        window = [by_id[i] for i in ids]

        map_step(state, window, cfg.weights, cfg.mapping.iterations)
        sliding_ba(state, window, cfg.weights, cfg.tracker.ba_iterations, cfg.tracker)
        for kf in window:
            self.poses[kf.frame_id] = kf.pose

        if cfg.uncertainty.enabled:
            chosen = set(cfg.uncertainty.window) or set(ids)
            observed = [kf for kf in window if kf.frame_id in chosen]
            run_cycle(state.cloud, uncertainty_records(state, observed), cfg.uncertainty)

        output, _ = render(state.cloud, current.pose, self.intrinsics, frame.depth, state.raster)
        spawn_gaussians(state, output, frame, current.pose)
        if cfg.dump_renders:
            dump_render(output, frame.index, self.output_dir / "renders")

        self._keyframe_count += 1
        if cfg.checkpoint_every and self._keyframe_count % cfg.checkpoint_every == 0:
            path = self.output_dir / "checkpoints" / f"{frame.index:06d}.ckpt"
            save_checkpoint(state.cloud, state.iteration, path)
        return cfg.mapping.iterations + len(window) * cfg.tracker.ba_iterations

    def process(self, frame: Frame) -> FrameTiming:
        self.timestamps.append(frame.timestamp)
        if self.state is None:
            timing = self._initialize(frame)
        else:
            cfg = self.config
            predicted = predict_pose(self.poses[-2:])
            start = time.perf_counter()
            result = track_frame(self.state, frame, predicted, cfg.weights, cfg.tracker)
            tracking_ms = (time.perf_counter() - start) * 1000.0
            self.poses.append(result.pose)

            keyframe = is_keyframe(frame.index, cfg.tracker)
            mapping_iterations, mapping_ms = 0, 0.0
            if keyframe:
                start = time.perf_counter()
                mapping_iterations = self._map_keyframe(frame, result.pose)
                mapping_ms = (time.perf_counter() - start) * 1000.0
            timing = FrameTiming(
                frame=frame.index,
                keyframe=keyframe,
                tracking_loss=result.loss,
                tracking_iterations=result.iterations,
                tracking_ms=tracking_ms,
                mapping_iterations=mapping_iterations,
                mapping_ms=mapping_ms,
                primitives=len(self.state.cloud),
                map_bytes=self.state.cloud.nbytes,
                degraded=result.degraded or result.invalid,
            )

        self.timings.append(timing)
        with (self.output_dir / "timing.jsonl").open("a") as f:
            f.write(json.dumps(asdict(timing)) + "\n")
        logger.info(
            f"Frame {timing.frame}: track loss {timing.tracking_loss:.5f}, {timing.tracking_iterations} it, "
            f"{timing.tracking_ms_per_iteration:.1f} ms/it tracking, "
            f"{timing.mapping_ms_per_iteration:.1f} ms/it mapping, "
            f"{timing.primitives} primitives"
        )
        return timing

    def efficiency(self) -> Dict[str, object]:
        """Per-iteration stage costs, throughput and map memory of the run."""
        tracked = [t for t in self.timings if t.tracking_iterations]
        mapped = [t for t in self.timings if t.mapping_iterations and t.tracking_iterations]
        tracking_ms = float(np.mean([t.tracking_ms_per_iteration for t in tracked])) if tracked else 0.0
        mapping_ms = float(np.mean([t.mapping_ms_per_iteration for t in mapped])) if mapped else 0.0
        tracking_it = self.config.tracker.iterations
        mapping_it = self.config.mapping.iterations
        total_s = sum(t.tracking_ms + t.mapping_ms for t in self.timings) / 1000.0
        return {
            "tracking_ms_x_it": f"{tracking_ms:.2f} x {tracking_it}",
            "mapping_ms_x_it": f"{mapping_ms:.2f} x {mapping_it}",
            "tracking_ms_per_it": tracking_ms,
            "mapping_ms_per_it": mapping_ms,
            "keyframe_interval": self.config.tracker.keyframe_interval,
            "fps": len(self.timings) / total_s if total_s > 0 else 0.0,
            "memory_mb": self.state.cloud.nbytes / 2**20,
            "primitives": len(self.state.cloud),
        }

    def evaluate(self) -> Dict[str, object]:
        state = self.state
        metrics: Dict[str, object] = {"frames": len(self.poses)}
        metrics.update(self.efficiency())
        scales = state.cloud.scales
        metrics["mean_anisotropy"] = float(np.mean(scales.max(axis=1) / scales.min(axis=1)))

        psnrs, l1s = [], []
        for kf in self.keyframes:
            output, _ = render(state.cloud, kf.pose, self.intrinsics, None, state.raster)
            psnrs.append(psnr(output.color, kf.frame.color))
            try:
                l1s.append(depth_l1(output.alpha_depth, kf.frame.depth))
            except EvaluationError as e:
                logger.warning(f"Keyframe {kf.frame_id} skipped in depth L1: {e}")
        metrics["psnr"] = float(np.mean(psnrs))
        if l1s:
            metrics["depth_l1_cm"] = float(np.mean(l1s))

        if self.sequence.has_ground_truth:
            gt_times, gt_poses = self.sequence.ground_truth()
            try:
                metrics["ate_rmse_cm"] = ate_rmse(self.timestamps, self.poses, gt_times, gt_poses)
            except EvaluationError as e:
                logger.warning(f"ATE not computed: {e}")

        if isinstance(self.sequence, SyntheticSequence):
            surface = self.sequence.scene.surface_points(SURFACE_SAMPLES, self.config.seed)
            observed = cull_unobserved(
                surface,
                [kf.frame.gt_pose for kf in self.keyframes],
                [kf.frame.depth for kf in self.keyframes],
                self.intrinsics,
            )
            metrics["chamfer_cm"] = chamfer_to_surface(state.cloud.means, surface)
            if observed.any():
                metrics["recon"] = recon_metrics(state.cloud.means, surface[observed])
        return metrics

    def finish(self) -> RunResult:
        if self.state is None:
            raise EvaluationError("The sequence produced no frames")
        write_tum_trajectory(self.output_dir / "trajectory.txt", self.timestamps, self.poses)
        save_checkpoint(self.state.cloud, self.state.iteration, self.output_dir / "map.ckpt")
        export_ply(self.state.cloud, self.output_dir / "map.ply")
        metrics = self.evaluate()
        write_metrics(metrics, self.output_dir)
        return RunResult(self.timestamps, self.poses, metrics, self.state, self.output_dir, self.timings)


def run_slam(config: RunConfig, sequence: Optional[FrameSequence] = None) -> RunResult:
    """Run the whole pipeline on the configured (or given) sequence."""
    sequence = sequence or open_sequence(config)
    logger.info(f"Running on {len(sequence)} frames at {sequence.intrinsics.width}x{sequence.intrinsics.height}")
    return SlamPipeline(config, sequence).run()
