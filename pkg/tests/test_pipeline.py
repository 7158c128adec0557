"""End-to-end tests of the SLAM scheduler and its run artifacts.

The short runs use tiny budgets. Runs marked `acceptance` reproduce the long synthetic
experiments and are deselected by default (`pytest -m acceptance` runs them).
"""

import json

import numpy as np
import pytest

from app.checkpoint import load_checkpoint
from app.dataset_io import read_tum_trajectory
from app.errors import EvaluationError
from app.models import (
    DatasetConfig,
    LossWeights,
    NoiseSpec,
    RunConfig,
    SceneSpec,
    SyntheticConfig,
    TrackerConfig,
)
from app.mapper import MapState, learning_rates
from app.optimizer import Adam
from app.pipeline import SlamPipeline, open_sequence, run_slam
from app.tracker import track_frame


def test_run_writes_every_artifact(run_config):
    """A short synthetic run leaves the trajectory, map, metrics, config snapshot and timings behind."""
    result = run_slam(run_config)
    out = run_config.output_dir
    for name in ("trajectory.txt", "map.ckpt", "map.ply", "metrics.txt", "metrics.json", "config.yaml", "VERSION"):
        assert (out / name).is_file(), name
    assert (out / "gt_map.ckpt").is_file()
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["000002.ckpt"]

    timestamps, poses = read_tum_trajectory(out / "trajectory.txt")
    assert len(poses) == 3
    assert np.allclose(timestamps, result.timestamps, atol=1e-6)
    # the first pose is the ground truth so the map lives in the evaluation frame
    gt = open_sequence(run_config).load_frame(0).gt_pose
    assert np.allclose(poses[0].matrix, gt.matrix, atol=1e-6)

    timings = [json.loads(line) for line in (out / "timing.jsonl").read_text().splitlines()]
    assert [t["keyframe"] for t in timings] == [True, False, True]
    assert timings[1]["tracking_iterations"] == 3

    metrics = json.loads((out / "metrics.json").read_text())
    for key in ("ate_rmse_cm", "psnr", "depth_l1_cm", "chamfer_cm", "mean_anisotropy", "tracking_ms_x_it"):
        assert key in metrics, key
    cloud, iteration = load_checkpoint(out / "map.ckpt")
    assert len(cloud) == len(result.state.cloud)
    assert iteration == result.state.iteration


def test_run_on_a_tum_folder(run_config, tum_dataset):
    """Real-format sequences run the same way and are evaluated against their ground truth."""
    config = run_config.model_copy(update={"dataset": DatasetConfig(format="tum", path=tum_dataset)})
    result = run_slam(config)
    assert len(result.poses) == 3
    assert "ate_rmse_cm" in result.metrics
    assert "chamfer_cm" not in result.metrics


def test_light_mode_halves_the_resolution(run_config):
    config = run_config.model_copy(update={"light": True})
    assert open_sequence(config).intrinsics.width == 16


def test_empty_sequence_is_reported(run_config):
    """Finishing without any frame is an error rather than an empty report."""
    pipeline = SlamPipeline(run_config, open_sequence(run_config))
    pipeline.prepare()
    with pytest.raises(EvaluationError):
        pipeline.finish()


def _synthetic_run(tmp_path, name: str, frames: int = 50, **updates) -> RunConfig:
    """The first `frames` frames of the default 50-frame circle around a 3000-primitive room."""
    config = RunConfig(
        output_dir=tmp_path / name,
        dataset=DatasetConfig(
            format="synthetic",
            max_frames=frames,
            synthetic=SyntheticConfig(scene=SceneSpec(num_primitives=3000, num_objects=2)),
        ),
        checkpoint_every=0,
    )
    return config.model_copy(update=updates)


@pytest.mark.acceptance
def test_repeated_runs_write_identical_trajectories(tmp_path):
    """A fixed seed and thread count reproduce the trajectory file byte for byte."""
    first = run_slam(_synthetic_run(tmp_path, "a", frames=10))
    second = run_slam(_synthetic_run(tmp_path, "b", frames=10))
    assert (first.output_dir / "trajectory.txt").read_bytes() == (second.output_dir / "trajectory.txt").read_bytes()


@pytest.mark.acceptance
def test_noiseless_circle_is_tracked_to_one_percent_of_the_radius(tmp_path):
    config = _synthetic_run(tmp_path, "clean")
    radius = config.dataset.synthetic.trajectory.radius
    assert run_slam(config).metrics["ate_rmse_cm"] < 0.01 * radius * 100.0


@pytest.mark.acceptance
def test_noisy_depth_is_tracked_to_three_percent_of_the_radius(tmp_path):
    config = _synthetic_run(tmp_path, "noisy")
    synthetic = config.dataset.synthetic.model_copy(update={"noise": NoiseSpec(depth_sigma=0.005)})
    config = config.model_copy(update={"dataset": config.dataset.model_copy(update={"synthetic": synthetic})})
    radius = synthetic.trajectory.radius
    assert run_slam(config).metrics["ate_rmse_cm"] < 0.03 * radius * 100.0


@pytest.mark.acceptance
def test_perturbed_poses_are_recovered(tmp_path):
    """Tracking from 1 degree and 2% of the scene size off lands within 0.1 degree and 0.1% in 95 of 100 trials."""
    config = _synthetic_run(tmp_path, "recovery", frames=1)
    sequence = open_sequence(config)
    frame = sequence.load_frame(0)
    state = MapState(
        cloud=sequence.gt_cloud.copy(),
        optimizer=Adam(learning_rates(config.mapping, 4.0)),
        config=config.mapping,
        intrinsics=sequence.intrinsics,
        raster=config.raster,
        scene_extent=4.0,
    )

    extent = config.dataset.synthetic.scene.extent
    rng = np.random.default_rng(0)
    recovered = 0
    for _ in range(100):
        axis = rng.normal(size=3)
        direction = rng.normal(size=3)
        delta = np.concatenate(
            [np.radians(1.0) * axis / np.linalg.norm(axis), 0.02 * extent * direction / np.linalg.norm(direction)]
        )
        start = frame.gt_pose.retract(delta)
        result = track_frame(state, frame, start, config.weights, TrackerConfig(iterations=15))
        angle, offset = result.pose.distance(frame.gt_pose)
        recovered += angle < np.radians(0.1) and offset < 0.001 * extent
    assert recovered >= 95


@pytest.mark.acceptance
def test_isotropy_term_limits_anisotropy(tmp_path):
    full = run_slam(_synthetic_run(tmp_path, "iso", frames=20))
    weights = LossWeights(iso=0.0)
    ablated = run_slam(_synthetic_run(tmp_path, "no_iso", frames=20, weights=weights))
    assert ablated.metrics["mean_anisotropy"] >= 1.5 * full.metrics["mean_anisotropy"]


@pytest.mark.acceptance
def test_alignment_and_variance_terms_tighten_the_surface(tmp_path):
    full = run_slam(_synthetic_run(tmp_path, "full", frames=20))
    weights = LossWeights(align=0.0, var=0.0)
    ablated = run_slam(_synthetic_run(tmp_path, "no_align_var", frames=20, weights=weights))
    assert full.metrics["chamfer_cm"] < ablated.metrics["chamfer_cm"]


def _run_with_outliers(config: RunConfig, share: float = 0.05, displacement: float = 0.05):
    """Run with a share of the initial map duplicated and pushed off the surface after the first frame."""
    sequence = open_sequence(config)
    pipeline = SlamPipeline(config, sequence)
    pipeline.prepare()
    rng = np.random.default_rng(config.seed)
    for frame in sequence:
        pipeline.process(frame)
        if frame.index == 0:
            state = pipeline.state
            picked = rng.choice(len(state.cloud), int(share * len(state.cloud)), replace=False)
            outliers = state.cloud.select(picked)
            direction = rng.normal(size=outliers.means.shape)
            outliers.means += displacement * direction / np.linalg.norm(direction, axis=1, keepdims=True)
            state.add(outliers)
    return pipeline.finish()


@pytest.mark.acceptance
def test_uncertainty_pruning_suppresses_outliers(tmp_path):
    """Reducing unreliable primitives beats keeping them, in both depth and trajectory error."""
    base = _synthetic_run(tmp_path, "pruned", frames=20)
    synthetic = base.dataset.synthetic.model_copy(update={"noise": NoiseSpec(depth_sigma=0.005)})
    base = base.model_copy(update={"dataset": base.dataset.model_copy(update={"synthetic": synthetic})})
    pruned = _run_with_outliers(base)
    kept = _run_with_outliers(
        base.model_copy(
            update={
                "output_dir": tmp_path / "kept",
                "uncertainty": base.uncertainty.model_copy(update={"enabled": False}),
            }
        )
    )
    assert pruned.metrics["depth_l1_cm"] < kept.metrics["depth_l1_cm"]
    assert pruned.metrics["ate_rmse_cm"] < kept.metrics["ate_rmse_cm"]
