"""Tests for per-primitive uncertainty accumulation and opacity reduction."""

import numpy as np
import pytest

from app.errors import InvalidArgumentError
from app.gaussians import GaussianCloud, logit, sigmoid
from app.geometry import CameraPose
from app.models import UncertaintyConfig
from app.rasterizer import render
from app.uncertainty import accumulate_uncertainty, prune_unreliable, run_cycle


@pytest.fixture
def two_primitives() -> GaussianCloud:
    """One large primitive in view at depth 2 and one behind the camera."""
    return GaussianCloud.from_points(
        np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -2.0]]),
        np.full((2, 3), 0.5),
        np.array([0.5, 0.1]),
        opacity=0.9,
    )


def test_uncertainty_is_weighted_error_over_dominated_pixels(two_primitives, intrinsics, identity_pose):
    """The visible primitive gets the weighted squared depth error averaged over the pixels it dominates."""
    observed = np.full((32, 32), 2.1)
    _, record = render(two_primitives, identity_pose, intrinsics, observed)
    two_primitives.uncertainty[1] = 0.3
    update = accumulate_uncertainty(two_primitives, {0: record})

    owned = record.owner_id == 0
    expected = np.sum(record.owner_weight[owned] * 0.01) / np.count_nonzero(owned)
    assert update.observed.tolist() == [True, False]
    assert np.isclose(two_primitives.uncertainty[0], expected)
    assert two_primitives.dominated_count[0] == np.count_nonzero(owned)
    # unobserved primitives keep their previous value
    assert two_primitives.uncertainty[1] == 0.3


def test_accumulation_ignores_window_order(two_primitives, intrinsics):
    """The result is the same whatever order the window records arrive in."""
    poses = [CameraPose.identity(), CameraPose([0.0, 0.05, 0.0], [0.05, 0.0, 0.0])]
    records = {}
    for k, pose in enumerate(poses):
        _, records[10 + k] = render(two_primitives, pose, intrinsics, np.full((32, 32), 1.8 + 0.3 * k))
    forward = two_primitives.copy()
    backward = two_primitives.copy()
    accumulate_uncertainty(forward, records)
    accumulate_uncertainty(backward, dict(reversed(list(records.items()))))
    assert np.array_equal(forward.uncertainty, backward.uncertainty)


def test_accumulation_rejects_stale_records(two_primitives, intrinsics, identity_pose):
    """A record rendered from a map of another size is rejected."""
    _, record = render(two_primitives.select(np.array([0])), identity_pose, intrinsics, np.full((32, 32), 2.0))
    with pytest.raises(InvalidArgumentError):
        accumulate_uncertainty(two_primitives, {0: record})


def test_prune_reduces_opacity_of_unreliable_primitives():
    """Primitives above tau drop to the reduced opacity but stay in the map."""
    cloud = GaussianCloud.from_points(np.zeros((3, 3)), np.full((3, 3), 0.5), np.full(3, 0.1), opacity=0.9)
    cloud.uncertainty[:] = [0.01, 0.5, 0.6]
    config = UncertaintyConfig(tau=0.1, reduced_opacity=0.005)
    reduced = prune_unreliable(cloud, config, observed=np.array([True, True, False]))
    assert reduced == 1
    assert len(cloud) == 3
    assert np.isclose(sigmoid(cloud.opacity_logits[1]), 0.005)
    assert np.isclose(cloud.opacity_logits[0], logit(0.9))
    assert np.isclose(cloud.opacity_logits[2], logit(0.9))


def test_disabled_cycle_changes_nothing(two_primitives, intrinsics, identity_pose):
    """A disabled cycle leaves uncertainty and opacity untouched."""
    _, record = render(two_primitives, identity_pose, intrinsics, np.full((32, 32), 5.0))
    before = two_primitives.copy()
    assert run_cycle(two_primitives, {0: record}, UncertaintyConfig(enabled=False)) == 0
    assert np.array_equal(before.uncertainty, two_primitives.uncertainty)
    assert np.array_equal(before.opacity_logits, two_primitives.opacity_logits)


def test_cycle_reduces_primitive_far_from_sensor_depth(two_primitives, intrinsics, identity_pose):
    """A primitive 3 m away from the observed surface is marked unreliable."""
    _, record = render(two_primitives, identity_pose, intrinsics, np.full((32, 32), 5.0))
    assert run_cycle(two_primitives, {0: record}, UncertaintyConfig(tau=0.025)) == 1
    assert np.isclose(two_primitives.opacities[0], 0.005)
