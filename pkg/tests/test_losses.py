"""Tests for the mapping and tracking objectives and their image-space gradients."""

import numpy as np
import pytest

from app.losses import (
    align_loss,
    color_loss,
    geo_loss,
    iso_loss,
    mapping_loss,
    ssim_loss,
    tracking_loss,
    var_loss,
)
from app.models import LossWeights
from app.rasterizer import render
from app.verification import random_pose, random_scene


def test_color_loss_value_and_gradient():
    """Mean absolute error over pixels and channels, with a sign gradient."""
    rendered = np.zeros((4, 4, 3))
    target = np.full((4, 4, 3), 0.5)
    term = color_loss(rendered, target)
    assert np.isclose(term.value, 0.5)
    assert np.allclose(term.grad.color, -1.0 / 48)
    assert not term.empty


def test_color_loss_normalizes_by_masked_pixels():
    """With a mask the mean runs over the unmasked pixels only, unless pixel-count normalization is off."""
    rendered = np.zeros((2, 2, 3))
    target = np.ones((2, 2, 3))
    mask = np.array([[True, False], [False, False]])
    assert np.isclose(color_loss(rendered, target, mask).value, 1.0)
    assert np.isclose(color_loss(rendered, target, mask, normalize_by_valid=False).value, 0.25)


def test_empty_masks_define_zero():
    """Every masked term is 0 with no gradient when its mask is empty."""
    zeros = np.zeros((3, 3))
    nothing = np.zeros((3, 3), dtype=bool)
    for term in [
        color_loss(np.zeros((3, 3, 3)), np.ones((3, 3, 3)), nothing),
        geo_loss(zeros, zeros + 1, nothing),
        align_loss(zeros, zeros + 1, nothing),
        var_loss(zeros + 1, nothing),
        var_loss(zeros + 1, ~nothing, present=False),
    ]:
        assert term.empty
        assert term.value == 0.0
        assert term.grad.color is None and term.grad.alpha_depth is None


def test_ssim_of_identical_images_is_zero():
    """1 - SSIM vanishes for identical images of both window regimes."""
    rng = np.random.default_rng(0)
    for shape in [(16, 16, 3), (6, 6, 3)]:
        image = rng.uniform(size=shape)
        assert abs(ssim_loss(image, image).value) < 1e-9


@pytest.mark.parametrize("shape", [(14, 13, 3), (5, 6, 3)])
def test_ssim_gradient_matches_differences(shape):
    """The analytic SSIM gradient agrees with central differences at sampled pixels."""
    rng = np.random.default_rng(1)
    x = rng.uniform(size=shape)
    y = rng.uniform(size=shape)
    grad = ssim_loss(x, y).grad.color
    h = 1e-6
    for index in [(0, 0, 0), (3, 4, 1), (shape[0] - 1, shape[1] - 2, 2)]:
        plus, minus = x.copy(), x.copy()
        plus[index] += h
        minus[index] -= h
        numeric = (ssim_loss(plus, y).value - ssim_loss(minus, y).value) / (2 * h)
        assert np.isclose(grad[index], numeric, rtol=1e-4, atol=1e-9)


def test_geo_and_align_losses():
    """Depth terms average absolute differences over their masks; align pulls both depths together."""
    alpha_depth = np.array([[2.0, 3.0], [1.0, 5.0]])
    observed = np.array([[2.5, 3.0], [0.0, 4.0]])
    mask = observed > 0
    geo = geo_loss(alpha_depth, observed, mask)
    assert np.isclose(geo.value, (0.5 + 0.0 + 1.0) / 3)
    assert geo.grad.alpha_depth[1, 0] == 0.0

    align = align_loss(alpha_depth, alpha_depth - 0.2, np.ones((2, 2), dtype=bool))
    assert np.isclose(align.value, 0.2)
    assert np.allclose(align.grad.alpha_depth, -align.grad.median_depth)


def test_iso_loss_penalizes_elongation():
    """Isotropic primitives cost nothing; a 2:1 primitive costs ratio - 1 averaged over visible ones."""
    log_scales = np.log(np.array([[0.1, 0.1, 0.1], [0.2, 0.1, 0.1], [0.4, 0.1, 0.1]]))
    visible = np.array([True, True, False])
    term = iso_loss(log_scales, visible)
    assert np.isclose(term.value, 0.5)
    assert np.isclose(term.d_log_scales[1, 0], 1.0)
    assert np.isclose(term.d_log_scales[1, 1] + term.d_log_scales[1, 2], -1.0)
    assert not term.d_log_scales[2].any()
    assert iso_loss(log_scales, np.zeros(3, dtype=bool)).empty


def test_var_loss_is_mean_uncertainty():
    """The variance term is the mean of the non-negative uncertainty map over its mask."""
    uncertainty = np.array([[0.1, 0.3], [0.0, 0.2]])
    term = var_loss(uncertainty, np.array([[True, True], [True, False]]))
    assert np.isclose(term.value, 0.4 / 3)


def test_mapping_loss_combines_weighted_terms(intrinsics):
    """The total is the weighted sum of the six reported terms."""
    rng = np.random.default_rng(2)
    pose = random_pose(rng)
    cloud = random_scene(rng, 30, intrinsics, pose)
    depth = rng.uniform(2.0, 4.0, (32, 32))
    color = rng.uniform(size=(32, 32, 3))
    output, record = render(cloud, pose, intrinsics, depth)
    weights = LossWeights()
    loss = mapping_loss(output, color, depth, record.observed_valid, cloud.log_scales, record.visible, weights)
    assert set(loss.terms) == {"color", "ssim", "geo", "align", "iso", "var"}
    expected = sum(getattr(weights, name) * value for name, value in loss.terms.items())
    assert np.isclose(loss.total, expected)
    assert loss.is_finite
    assert loss.d_log_scales is not None


def test_tracking_loss_uses_tracking_weights(intrinsics):
    """Tracking combines only colour and geometry, weighted by the tracking weights."""
    rng = np.random.default_rng(3)
    pose = random_pose(rng)
    cloud = random_scene(rng, 30, intrinsics, pose)
    depth = rng.uniform(2.0, 4.0, (32, 32))
    output, record = render(cloud, pose, intrinsics, depth)
    weights = LossWeights(track_color=0.5, track_geo=2.0, opacity_floor=0.0)
    loss = tracking_loss(output, output.color, depth, record.observed_valid, weights)
    assert set(loss.terms) == {"color", "geo"}
    assert loss.terms["color"] == 0.0
    assert np.isclose(loss.total, 2.0 * loss.terms["geo"])
