"""Tests for rotations, poses, covariances and projection."""

import numpy as np
import pytest

from app.errors import InvalidArgumentError
from app.gaussians import GaussianPrimitive
from app.geometry import (
    CameraPose,
    backproject,
    backproject_pixels,
    build_covariance,
    exp_map,
    hat,
    log_map,
    project_gaussian,
    project_points,
    quat_to_rotmat,
    rotmat_to_quat,
)


def test_hat_is_cross_product():
    """hat(v) @ w equals v x w."""
    v, w = np.array([0.3, -1.2, 2.0]), np.array([1.0, 0.5, -0.7])
    assert np.allclose(hat(v) @ w, np.cross(v, w))


@pytest.mark.parametrize("tangent", [[0.0, 0.0, 0.0], [1e-10, 0.0, -1e-10], [0.3, -0.2, 0.9], [0.0, 3.0, 0.0]])
def test_log_inverts_exp(tangent):
    """log(exp(w)) recovers w for angles below pi, including the small-angle branch."""
    w = np.array(tangent)
    R = exp_map(w)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)
    assert np.allclose(log_map(R), w, atol=1e-9)


def test_log_near_pi_recovers_axis():
    """A rotation by nearly pi keeps its axis."""
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    w = (np.pi - 1e-8) * axis
    assert np.allclose(log_map(exp_map(w)), w, atol=1e-5)


def test_quaternion_matrix_round_trip():
    """Quaternions map to rotation matrices and back with a non-negative scalar part."""
    q = np.array([-0.5, 0.5, -0.5, 0.5])
    R = quat_to_rotmat(q)
    back = rotmat_to_quat(R)
    assert back[0] >= 0
    assert np.allclose(quat_to_rotmat(back), R)
    assert np.allclose(np.abs(back), np.abs(q))


def test_covariance_eigenvalues_are_squared_scales():
    """R S S^T R^T is symmetric with eigenvalues equal to the squared scales."""
    scale = np.array([0.1, 0.4, 0.2])
    cov = build_covariance(scale, np.array([0.9, 0.1, -0.3, 0.2]))
    assert np.allclose(cov, cov.T)
    assert np.allclose(np.sort(np.linalg.eigvalsh(cov)), np.sort(scale**2))


@pytest.mark.parametrize(
    "scale, rotation",
    [
        ([0.1, 0.0, 0.2], [1.0, 0.0, 0.0, 0.0]),
        ([0.1, -0.1, 0.2], [1.0, 0.0, 0.0, 0.0]),
        ([0.1, 0.1, 0.2], [0.0, 0.0, 0.0, 0.0]),
        ([0.1, np.nan, 0.2], [1.0, 0.0, 0.0, 0.0]),
    ],
)
def test_covariance_rejects_degenerate_inputs(scale, rotation):
    """Non-positive or non-finite scales and zero quaternions are rejected."""
    with pytest.raises(InvalidArgumentError):
        build_covariance(np.array(scale), np.array(rotation))


def test_pose_inverse_and_compose():
    """A pose composed with its inverse is the identity; compose applies the right operand first."""
    a = CameraPose([0.1, -0.2, 0.3], [0.5, 0.0, -1.0])
    b = CameraPose([-0.4, 0.1, 0.0], [0.0, 2.0, 0.3])
    ident = a.compose(a.inverse())
    assert np.allclose(ident.matrix, np.eye(4), atol=1e-12)
    p = np.array([[0.3, 0.7, 2.0]])
    assert np.allclose(a.compose(b).transform(p), a.transform(b.transform(p)))


def test_retract_perturbs_in_camera_frame():
    """retract((0, dt)) shifts camera-frame points by dt; a zero increment changes nothing."""
    pose = CameraPose([0.2, 0.1, -0.3], [0.1, 0.2, 0.3])
    p = np.array([[1.0, -1.0, 3.0]])
    moved = pose.retract(np.array([0.0, 0.0, 0.0, 0.1, 0.0, -0.2]))
    assert np.allclose(moved.transform(p), pose.transform(p) + [0.1, 0.0, -0.2])
    assert np.allclose(pose.retract(np.zeros(6)).matrix, pose.matrix)


def test_tum_round_trip_and_camera_center():
    """The TUM position is the camera centre, and the TUM entry reproduces the pose."""
    pose = CameraPose([0.3, -0.1, 0.2], [0.4, -0.5, 1.0])
    position, quat = pose.to_tum()
    assert np.allclose(position, pose.camera_center)
    assert np.allclose(pose.transform(position[None])[0], 0.0, atol=1e-12)
    assert np.allclose(CameraPose.from_tum(position, quat).matrix, pose.matrix)


def test_look_at_centres_the_target(intrinsics):
    """The target projects to the principal point in front of the camera."""
    pose = CameraPose.look_at([1.0, -0.5, 2.0], [0.0, 0.0, 0.0])
    uv, z = project_points(np.zeros((1, 3)), pose, intrinsics)
    assert np.allclose(uv[0], [intrinsics.cx, intrinsics.cy])
    assert z[0] > 0


def test_look_at_rejects_degenerate_directions():
    """Coincident target or an up vector along the view direction raise."""
    with pytest.raises(InvalidArgumentError):
        CameraPose.look_at([0.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    with pytest.raises(InvalidArgumentError):
        CameraPose.look_at([0.0, 0.0, 0.0], [0.0, 1.0, 0.0])


def test_backprojection_inverts_projection(intrinsics):
    """Pixels backprojected at their depth project back to the same pixels."""
    pose = CameraPose([0.05, -0.02, 0.1], [0.1, 0.0, 0.2])
    pixels = np.array([[0.0, 0.0], [16.0, 16.0], [31.0, 5.0]])
    depths = np.array([1.0, 2.5, 4.0])
    points = backproject_pixels(pixels, depths, pose, intrinsics)
    uv, z = project_points(points, pose, intrinsics)
    assert np.allclose(uv, pixels)
    assert np.allclose(z, depths)
    assert np.allclose(backproject(pixels[1], 2.5, pose, intrinsics), points[1])


def test_backproject_rejects_depth_outside_range(intrinsics):
    """Depth must lie strictly between the near and far planes."""
    with pytest.raises(InvalidArgumentError):
        backproject(np.array([3.0, 4.0]), 0.0, CameraPose.identity(), intrinsics)
    with pytest.raises(InvalidArgumentError):
        backproject(np.array([3.0, 4.0]), intrinsics.far, CameraPose.identity(), intrinsics)


def test_project_gaussian_visibility(intrinsics):
    """A primitive ahead of the camera lands on the principal point; one behind it is invisible."""
    ahead = GaussianPrimitive.from_color([0.0, 0.0, 2.0], [0.1, 0.1, 0.1], [0.5, 0.5, 0.5])
    behind = GaussianPrimitive.from_color([0.0, 0.0, -2.0], [0.1, 0.1, 0.1], [0.5, 0.5, 0.5])
    seen = project_gaussian(ahead, CameraPose.identity(), intrinsics)
    assert seen.visible
    assert np.allclose(seen.mean2d, [intrinsics.cx, intrinsics.cy])
    assert np.isclose(seen.depth, 2.0)
    # isotropic 0.1 at depth 2 with fx 32: (32 * 0.1 / 2)^2 plus the dilation
    assert np.allclose(seen.cov2d, np.eye(2) * (1.6**2 + 0.3))
    assert not project_gaussian(behind, CameraPose.identity(), intrinsics).visible
