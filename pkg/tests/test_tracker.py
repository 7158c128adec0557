"""Tests for pose prediction, tracking, keyframe descriptors, window selection and bundle adjustment."""

import numpy as np
import pytest

from app.dataset_io import Frame
from app.errors import InvalidArgumentError
from app.geometry import CameraPose
from app.mapper import MapState, learning_rates
from app.models import LossWeights, MappingConfig, RasterSettings, TrackerConfig
from app.optimizer import Adam
from app.synthetic import generate_synthetic_sequence
from app.tracker import (
    KeyframeRecord,
    compute_descriptor,
    is_keyframe,
    predict_pose,
    select_window,
    sliding_ba,
    track_frame,
)


@pytest.fixture
def scene(synthetic_config, intrinsics):
    """The ground-truth map as the current map, plus its rendered frames."""
    sequence = generate_synthetic_sequence(synthetic_config, intrinsics, seed=1)
    config = MappingConfig()
    state = MapState(
        cloud=sequence.gt_cloud.copy(),
        optimizer=Adam(learning_rates(config, 4.0)),
        config=config,
        intrinsics=intrinsics,
        raster=RasterSettings(),
        scene_extent=4.0,
    )
    return state, sequence


def _unit(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return v / np.linalg.norm(v)


def test_prediction_without_history_and_with_one_pose():
    """No history predicts the identity; a single pose is repeated."""
    assert np.allclose(predict_pose([]).matrix, np.eye(4))
    pose = CameraPose([0.1, 0.2, 0.3], [1.0, 2.0, 3.0])
    assert np.allclose(predict_pose([pose]).matrix, pose.matrix)


def test_prediction_repeats_last_motion():
    """Constant velocity: the last relative motion is applied once more."""
    motion = CameraPose([0.0, 0.02, 0.0], [0.01, 0.0, 0.0])
    first = CameraPose([0.1, -0.1, 0.05], [0.2, 0.0, 1.0])
    second = motion.compose(first)
    expected = motion.compose(second)
    assert np.allclose(predict_pose([first, second]).matrix, expected.matrix)


def test_keyframe_schedule():
    """Frames on the keyframe interval are keyframes, starting with frame 0."""
    config = TrackerConfig(keyframe_interval=5)
    assert [k for k in range(12) if is_keyframe(k, config)] == [0, 5, 10]


def test_descriptor_is_unit_length_and_deterministic():
    """The descriptor has the configured length, unit norm, and depends only on the image."""
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(32, 32, 3))
    config = TrackerConfig(descriptor_grid=4, descriptor_bins=8)
    d = compute_descriptor(image, config)
    assert d.shape == (config.descriptor_length,)
    assert np.isclose(np.linalg.norm(d), 1.0)
    assert np.array_equal(d, compute_descriptor(image.copy(), config))
    assert not np.allclose(d, compute_descriptor(1.0 - image, config))


def test_keyframe_record_requires_unit_descriptor(intrinsics):
    """Descriptors that are not unit vectors are rejected."""
    frame = Frame.create(0, 0.0, np.zeros((32, 32, 3)), np.ones((32, 32)), intrinsics)
    with pytest.raises(InvalidArgumentError):
        KeyframeRecord(0, frame, CameraPose.identity(), np.array([1.0, 1.0]))


def test_window_order(intrinsics):
    """Current frame, then recent keyframes newest first, then the rest by similarity, capped at the size."""
    frame = Frame.create(0, 0.0, np.zeros((32, 32, 3)), np.ones((32, 32)), intrinsics)
    query = _unit([1.0, 0.0, 0.0])
    descriptors = {
        0: _unit([0.0, 1.0, 0.0]),
        10: _unit([1.0, 0.1, 0.0]),
        20: _unit([0.2, 1.0, 0.0]),
        30: _unit([1.0, 1.0, 0.0]),
        40: _unit([0.0, 0.0, 1.0]),
        50: query,
    }
    pool = [KeyframeRecord(i, frame, CameraPose.identity(), d) for i, d in descriptors.items()]
    config = TrackerConfig(window_size=5, recent_keyframes=2)
    assert select_window(pool, 50, query, config) == [50, 40, 30, 10, 20]
    assert select_window(pool, 50, query, config.model_copy(update={"window_size": 2})) == [50, 40]


def test_window_breaks_similarity_ties_by_recency(intrinsics):
    """Equally similar keyframes are ordered newest first."""
    frame = Frame.create(0, 0.0, np.zeros((32, 32, 3)), np.ones((32, 32)), intrinsics)
    same = _unit([1.0, 1.0])
    pool = [KeyframeRecord(i, frame, CameraPose.identity(), same) for i in (0, 1, 2, 3)]
    config = TrackerConfig(window_size=4, recent_keyframes=0)
    assert select_window(pool, 3, same, config) == [3, 2, 1, 0]


def test_tracking_recovers_a_perturbed_pose(scene):
    """Starting a few centimeters off, tracking moves the pose toward the true one."""
    state, sequence = scene
    frame = sequence.load_frame(1)
    start = frame.gt_pose.retract(np.array([0.0, 0.0, 0.0, 0.02, -0.01, 0.0]))
    result = track_frame(state, frame, start, LossWeights(), TrackerConfig(), iterations=40)
    _, before = start.distance(frame.gt_pose)
    _, after = result.pose.distance(frame.gt_pose)
    assert after < before
    assert result.loss < result.initial_loss
    assert len(result.trace) == 40
    assert not result.invalid


def test_tracking_without_depth_keeps_prediction(scene, intrinsics):
    """A frame with no valid depth is flagged and the predicted pose is kept."""
    state, sequence = scene
    frame = sequence.load_frame(0)
    blind = Frame.create(frame.index, frame.timestamp, frame.color, np.zeros((32, 32)), intrinsics)
    result = track_frame(state, blind, frame.gt_pose, LossWeights(), TrackerConfig())
    assert result.invalid
    assert np.isnan(result.loss)
    assert np.allclose(result.pose.matrix, frame.gt_pose.matrix)


def test_zero_iterations_only_evaluate(scene):
    """With no iterations the loss is evaluated once and the pose is unchanged."""
    state, sequence = scene
    frame = sequence.load_frame(0)
    result = track_frame(state, frame, frame.gt_pose, LossWeights(), TrackerConfig(), iterations=0)
    assert result.iterations == 0
    assert len(result.trace) == 1
    assert np.allclose(result.pose.matrix, frame.gt_pose.matrix)


def test_bundle_adjustment_holds_the_oldest_keyframe(scene):
    """The oldest window keyframe stays fixed while the others and the map move."""
    state, sequence = scene
    offset = np.array([0.0, 0.01, 0.0, 0.01, 0.0, 0.0])
    window = []
    for k in (2, 0, 1):
        frame = sequence.load_frame(k)
        window.append(KeyframeRecord(k, frame, frame.gt_pose.retract(offset), compute_descriptor(frame.color)))
    starts = [keyframe.pose for keyframe in window]
    means = state.cloud.means.copy()

    trace = sliding_ba(state, window, LossWeights(), iterations=3, config=TrackerConfig())
    assert len(trace) == 3
    assert window[1].pose is starts[1]
    assert not np.allclose(window[0].pose.matrix, starts[0].matrix)
    assert not np.array_equal(state.cloud.means, means)
    assert sliding_ba(state, window, LossWeights(), iterations=0, config=TrackerConfig()) == []
