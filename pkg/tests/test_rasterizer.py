"""Tests for the tiled rasterizer, the brute-force renderer and the backward pass."""

import numpy as np
import pytest

from app.errors import InvalidArgumentError
from app.gaussians import GaussianCloud, GaussianPrimitive
from app.models import RasterSettings
from app.rasterizer import (
    ImageGradients,
    observed_validity,
    render,
    render_backward,
    render_reference,
    render_replay,
)
from app.startup import startup
from app.verification import (
    GradientProblem,
    blend_properties,
    oracle_check,
    parameter_check,
    pose_check,
    random_pose,
    random_scene,
    replay_check,
    same_blend,
    truncation_check,
    truncation_excess,
)


def test_empty_map_renders_nothing(intrinsics, identity_pose):
    """With no primitives every map is zero and no pixel has a median depth."""
    output, record = render(GaussianCloud.empty(), identity_pose, intrinsics)
    assert output.color.shape == (32, 32, 3)
    assert not output.color.any()
    assert not output.opacity.any()
    assert not output.median_valid.any()
    assert (output.per_pixel_count == 0).all()
    assert (record.owner_id == -1).all()


def test_single_primitive_at_pixel_centre(intrinsics, identity_pose):
    """At the projected centre alpha equals the opacity, so every map is alpha times the primitive's value."""
    primitive = GaussianPrimitive.from_color([0.0, 0.0, 2.0], [0.1, 0.1, 0.1], [0.2, 0.4, 0.6], opacity=0.8)
    output, _ = render([primitive], identity_pose, intrinsics)
    row, col = 16, 16
    assert np.allclose(output.color[row, col], 0.8 * np.array([0.2, 0.4, 0.6]))
    assert np.isclose(output.alpha_depth[row, col], 1.6)
    assert np.isclose(output.opacity[row, col], 0.8)
    assert output.median_valid[row, col]
    assert np.isclose(output.median_depth[row, col], 2.0)
    assert output.per_pixel_count[row, col] == 1
    assert output.opacity[0, 0] == 0.0


def test_nearer_primitive_is_blended_first(intrinsics, identity_pose):
    """Front-to-back order does not depend on the order primitives are listed in."""
    red = GaussianPrimitive.from_color([0.0, 0.0, 1.0], [0.05] * 3, [1.0, 0.0, 0.0], opacity=0.9)
    blue = GaussianPrimitive.from_color([0.0, 0.0, 3.0], [0.15] * 3, [0.0, 0.0, 1.0], opacity=0.9)
    first, _ = render([blue, red], identity_pose, intrinsics)
    second, _ = render([red, blue], identity_pose, intrinsics)
    assert np.allclose(first.color[16, 16], [0.9, 0.0, 0.09])
    assert np.allclose(first.color, second.color)
    assert np.isclose(first.median_depth[16, 16], 1.0)


def test_uncertainty_map_against_sensor_depth(intrinsics, identity_pose):
    """The variance map is the blended squared depth residual, and zero where sensor depth is invalid."""
    primitive = GaussianPrimitive.from_color([0.0, 0.0, 2.0], [0.1, 0.1, 0.1], [0.5] * 3, opacity=0.8)
    observed = np.full((32, 32), 2.5)
    observed[16, 17] = 0.0
    output, record = render([primitive], identity_pose, intrinsics, observed)
    assert output.uncertainty_present
    assert np.isclose(output.uncertainty[16, 16], 0.8 * 0.25)
    assert output.uncertainty[16, 17] == 0.0
    assert not record.observed_valid[16, 17]


def test_tiled_matches_reference():
    """Tiled and brute-force renderers agree on a random scene."""
    ok, worst = oracle_check(seed=3, count=120)
    assert ok, f"max difference {worst}"


def test_reference_ignores_termination(intrinsics):
    """Only the tiled renderer stops early, and the maps differ by at most the leftover transmittance."""
    rng = np.random.default_rng(5)
    pose = random_pose(rng)
    cloud = random_scene(rng, 60, intrinsics, pose, sh_degree=0, scale_range=(0.1, 0.3))
    settings = RasterSettings(termination=0.2)
    tiled, record = render(cloud, pose, intrinsics, None, settings)
    reference = render_reference(cloud, pose, intrinsics, None, settings)
    unstopped = render_reference(cloud, pose, intrinsics, None, settings.model_copy(update={"termination": 0.0}))
    assert np.array_equal(reference.color, unstopped.color)
    assert not np.allclose(tiled.opacity, reference.opacity)
    assert truncation_excess(tiled, reference, record) <= 1e-12
    # one more primitive past the stop point can take T below the threshold, but not below 0.2 * (1 - 0.99)
    assert (1.0 - tiled.opacity).min() >= 0.2 * 0.01 - 1e-12


def test_production_termination_stays_within_bound():
    """With the default threshold, a dense scene stops early somewhere and stays within the bound."""
    ok, excess, stopped = truncation_check(seed=1)
    assert stopped > 0
    assert ok, f"excess {excess}"


def test_replay_reproduces_render():
    """Replaying a pass on its own blend structure gives back the same maps."""
    problem = GradientProblem.random(seed=4)
    ok, worst = replay_check(problem)
    assert ok, f"max difference {worst}"


def test_replay_holds_structure_across_a_boundary(intrinsics, identity_pose):
    """A primitive pushed past the cutoff drops out of `render` but stays blended in a replay."""
    primitive = GaussianPrimitive.from_color([0.0, 0.0, 2.0], [0.05, 0.05, 0.05], [0.5] * 3, opacity=0.8)
    output, record = render([primitive], identity_pose, intrinsics)
    moved = GaussianCloud.from_primitives([primitive])
    moved.means[0, 0] += 0.1
    shifted, shifted_record = render(moved, identity_pose, intrinsics)
    replayed = render_replay(moved, identity_pose, intrinsics, record)
    assert not same_blend(record, shifted_record)
    assert np.array_equal(replayed.per_pixel_count, output.per_pixel_count)
    assert not np.allclose(replayed.opacity, output.opacity)
    assert not np.array_equal(shifted.per_pixel_count, output.per_pixel_count)


def test_blend_properties_hold(intrinsics):
    """Median rule, opacity conservation and monotone transmittance hold on a random scene."""
    rng = np.random.default_rng(11)
    pose = random_pose(rng)
    cloud = random_scene(rng, 80, intrinsics, pose, sh_degree=0, scale_range=(0.05, 0.3))
    output, record = render(cloud, pose, intrinsics, None, RasterSettings(termination=0.0))
    worst = blend_properties(record, output.opacity)
    assert worst["median"] == 0
    assert worst["conservation"] < 1e-9
    assert worst["increase"] <= 0.0


def test_render_is_independent_of_thread_count(intrinsics):
    """Forward maps and backward gradients are bitwise identical with one and four workers."""
    rng = np.random.default_rng(2)
    pose = random_pose(rng)
    cloud = random_scene(rng, 50, intrinsics, pose, sh_degree=1)
    observed = rng.uniform(2.0, 4.0, (32, 32))
    upstream = ImageGradients(color=rng.normal(size=(32, 32, 3)), alpha_depth=rng.normal(size=(32, 32)))

    def run():
        output, record = render(cloud, pose, intrinsics, observed, RasterSettings(tile_size=8))
        return output, render_backward(cloud, pose, intrinsics, record, upstream)

    single_output, single_grads = run()
    startup(4)
    multi_output, multi_grads = run()
    assert np.array_equal(single_output.color, multi_output.color)
    assert np.array_equal(single_output.uncertainty, multi_output.uncertainty)
    assert np.array_equal(single_grads.d_mean, multi_grads.d_mean)
    assert np.array_equal(single_grads.d_pose, multi_grads.d_pose)


def test_zero_upstream_gives_zero_gradients(intrinsics):
    """Without upstream gradients every parameter and pose gradient is zero."""
    rng = np.random.default_rng(4)
    pose = random_pose(rng)
    cloud = random_scene(rng, 20, intrinsics, pose)
    _, record = render(cloud, pose, intrinsics)
    bundle = render_backward(cloud, pose, intrinsics, record, ImageGradients())
    assert bundle.is_finite()
    assert not bundle.d_pose.any()
    assert not bundle.d_mean.any()
    assert not bundle.d_sh.any()


def test_backward_rejects_mismatched_record(intrinsics, identity_pose):
    """A record from a different map size is rejected."""
    rng = np.random.default_rng(4)
    cloud = random_scene(rng, 10, intrinsics)
    _, record = render(cloud, identity_pose, intrinsics)
    with pytest.raises(InvalidArgumentError):
        render_backward(cloud.select(np.arange(5)), identity_pose, intrinsics, record, ImageGradients())


def test_observed_validity_checks_shape(intrinsics):
    """Depth of the wrong size is rejected; holes, NaN and out-of-range depth are invalid."""
    with pytest.raises(InvalidArgumentError):
        observed_validity(np.ones((4, 4)), intrinsics)
    depth = np.full((32, 32), 2.0)
    depth[0, :3] = [0.0, np.nan, intrinsics.far + 1.0]
    valid = observed_validity(depth, intrinsics)
    assert not valid[0, :3].any()
    assert valid[1:].all()


@pytest.mark.parametrize("name", ["means", "log_scales", "quats", "opacity_logits", "sh"])
def test_parameter_gradients_match_finite_differences(name):
    """Analytic gradients of the full mapping objective agree with central differences."""
    problem = GradientProblem.random(seed=0)
    check = parameter_check(problem, "mapping", name, samples=5, rng=np.random.default_rng(0))
    assert check.passed, check.detail


@pytest.mark.parametrize("term", ["color", "geo", "tracking"])
def test_pose_gradient_matches_finite_differences(term):
    """The camera-frame pose gradient agrees with central differences of retracted poses."""
    problem = GradientProblem.random(seed=1)
    check = pose_check(problem, term)
    assert check.passed, check.detail


def test_pose_gradient_of_translated_camera_is_nonzero():
    """A camera moved off the observed viewpoint receives a non-zero translation gradient."""
    problem = GradientProblem.random(seed=2)
    shifted = problem.pose.retract(np.array([0.0, 0.0, 0.0, 0.05, 0.0, 0.0]))
    output, _ = render(problem.cloud, problem.pose, problem.intrinsics, None, problem.settings)
    moved, moved_record = render(problem.cloud, shifted, problem.intrinsics, None, problem.settings)
    upstream = ImageGradients(color=2.0 * (moved.color - output.color))
    bundle = render_backward(problem.cloud, shifted, problem.intrinsics, moved_record, upstream)
    assert np.linalg.norm(bundle.d_pose[3:]) > 0
