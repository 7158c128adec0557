"""Rigid transforms on the rotation Lie algebra, Gaussian covariances and pinhole/EWA projection.

Conventions used throughout the package:

- Quaternions are scalar-first (w, x, y, z).
- Poses are world-to-camera: ``p_cam = exp(rotation_tangent) @ p_world + translation``.
- Pixel (row i, column j) has image coordinates (u, v) = (j, i); pixel centres sit on integers.
- Pose increments act in the camera frame: ``p_cam' = exp(dw) @ p_cam + dt``.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from app.errors import InvalidArgumentError
from app.models import CameraIntrinsics

if TYPE_CHECKING:
    from app.gaussians import GaussianPrimitive

SMALL_ANGLE = 1e-8

# so(3) generators: HAT_BASIS[k] @ v == cross(e_k, v)
HAT_BASIS = np.array(
    [
        [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    ]
)


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector (or a stack of them)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def exp_map(tangent: np.ndarray) -> np.ndarray:
    """Rotation matrix of a tangent vector (Rodrigues formula)."""
    w = np.asarray(tangent, dtype=float).reshape(3)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    return np.eye(3) + (np.sin(theta) / theta) * W + ((1.0 - np.cos(theta)) / theta**2) * (W @ W)


def log_map(rotation: np.ndarray) -> np.ndarray:
    """Tangent vector of a rotation matrix, inverse of `exp_map` for angles below pi."""
    R = np.asarray(rotation, dtype=float).reshape(3, 3)
    cos_theta = float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
    axis_sin = vee(R - R.T) / 2.0
    sin_theta = float(np.linalg.norm(axis_sin))
    theta = float(np.arctan2(sin_theta, cos_theta))

    if theta < SMALL_ANGLE:
        return axis_sin * (1.0 + theta**2 / 6.0)

    if np.pi - theta < 1e-6:
        # axis from the symmetric part; sin(theta) is too small to divide by
        outer = ((R + R.T) / 2.0 - cos_theta * np.eye(3)) / (1.0 - cos_theta)
        k = int(np.argmax(np.diag(outer)))
        axis = outer[:, k] / np.sqrt(max(outer[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ axis_sin < 0:
            axis = -axis
        return theta * axis

    return (theta / sin_theta) * axis_sin


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices of scalar-first quaternions; inputs are normalized first."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Scalar-first unit quaternion of a rotation matrix, with w >= 0."""
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    wxyz = np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)
    sign = np.where(wxyz[..., :1] < 0, -1.0, 1.0)
    return wxyz * sign


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b of scalar-first quaternions."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def build_covariance(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Covariance R S S^T R^T of one primitive from its scale and unit quaternion."""
    scale = np.asarray(scale, dtype=float)
    rotation = np.asarray(rotation, dtype=float)
    if scale.shape != (3,) or rotation.shape != (4,):
        raise InvalidArgumentError(f"expected scale (3,) and quaternion (4,), got {scale.shape}, {rotation.shape}")
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(rotation))):
        raise InvalidArgumentError("scale and rotation must be finite")
    if np.any(scale <= 0):
        raise InvalidArgumentError(f"scale components must be positive, got {scale}")
    if np.linalg.norm(rotation) == 0:
        raise InvalidArgumentError("rotation quaternion has zero norm")
    return build_covariances(scale[None], rotation[None])[0]


def build_covariances(scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Vectorized covariance construction for (N, 3) scales and (N, 4) quaternions."""
    M = quat_to_rotmat(quats) * scales[:, None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rigid transform stored as a rotation tangent vector and a translation."""

    rotation_tangent: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation_tangent", np.asarray(self.rotation_tangent, dtype=float).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, translation: np.ndarray) -> "CameraPose":
        return cls(log_map(rotation), translation)

    @classmethod
    def from_tum(cls, position: np.ndarray, quat_xyzw: np.ndarray) -> "CameraPose":
        """World-to-camera pose from a TUM trajectory entry (camera-to-world position and orientation)."""
        R_wc = Rotation.from_quat(np.asarray(quat_xyzw, dtype=float)).as_matrix()
        position = np.asarray(position, dtype=float)
        return cls.from_matrix(R_wc.T, -R_wc.T @ position)

    @classmethod
    def look_at(cls, position: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, -1.0, 0.0)) -> "CameraPose":
        """Camera at `position` with its optical axis through `target` (x right, y down, z forward)."""
        position = np.asarray(position, dtype=float)
        forward = np.asarray(target, dtype=float) - position
        norm = np.linalg.norm(forward)
        if norm == 0:
            raise InvalidArgumentError("look_at target coincides with the camera position")
        z = forward / norm
        x = np.cross(z, np.asarray(up, dtype=float))
        if np.linalg.norm(x) < 1e-12:
            raise InvalidArgumentError("look_at up vector is parallel to the viewing direction")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R_wc = np.stack([x, y, z], axis=1)
        return cls.from_matrix(R_wc.T, -R_wc.T @ position)

    @cached_property
    def rotation(self) -> np.ndarray:
        return exp_map(self.rotation_tangent)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_tum(self) -> Tuple[np.ndarray, np.ndarray]:
        """Camera-to-world position and (qx, qy, qz, qw) orientation."""
        R_wc = self.rotation.T
        return self.camera_center, Rotation.from_matrix(R_wc).as_quat()

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) into the camera frame."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "CameraPose":
        R_inv = self.rotation.T
        return CameraPose.from_matrix(R_inv, -R_inv @ self.translation)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """The transform applying `other` first, then `self`."""
        R = self.rotation @ other.rotation
        return CameraPose.from_matrix(R, self.rotation @ other.translation + self.translation)

    def retract(self, delta: np.ndarray) -> "CameraPose":
        """Apply a camera-frame increment (dw, dt): R <- exp(dw) R, t <- exp(dw) t + dt."""
        delta = np.asarray(delta, dtype=float).reshape(6)
        E = exp_map(delta[:3])
        return CameraPose.from_matrix(E @ self.rotation, E @ self.translation + delta[3:])

    def distance(self, other: "CameraPose") -> Tuple[float, float]:
        """Rotation angle (rad) and camera-centre distance between two poses."""
        relative = self.rotation @ other.rotation.T
        angle = float(np.linalg.norm(log_map(relative)))
        return angle, float(np.linalg.norm(self.camera_center - other.camera_center))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.rotation_tangent)) and np.all(np.isfinite(self.translation)))


def project_points(points: np.ndarray, pose: CameraPose, intrinsics: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (N, 2) and camera depths (N,) of world points."""
    p = pose.transform(points)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * p[..., 0] / z + intrinsics.cx
        v = intrinsics.fy * p[..., 1] / z + intrinsics.cy
    return np.stack([u, v], axis=-1), z


def backproject(pixel: np.ndarray, depth: float, pose: CameraPose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """World point seen at `pixel` with camera depth `depth`."""
    if not intrinsics.near < depth < intrinsics.far:
        raise InvalidArgumentError(f"depth {depth} outside ({intrinsics.near}, {intrinsics.far})")
    pixel = np.asarray(pixel, dtype=float).reshape(1, 2)
    return backproject_pixels(pixel, np.array([depth], dtype=float), pose, intrinsics)[0]


def backproject_pixels(
    pixels: np.ndarray, depths: np.ndarray, pose: CameraPose, intrinsics: CameraIntrinsics
) -> np.ndarray:
    """Vectorized backprojection of (N, 2) pixel coordinates with (N,) depths to world points."""
    x = (pixels[:, 0] - intrinsics.cx) / intrinsics.fx * depths
    y = (pixels[:, 1] - intrinsics.cy) / intrinsics.fy * depths
    p_cam = np.stack([x, y, depths], axis=-1)
    R = pose.rotation
    return (p_cam - pose.translation) @ R


@dataclass
class ProjectedGaussians:
    """Screen-space footprint of every primitive under one camera (EWA affine approximation)."""

    p_cam: np.ndarray  # (N, 3)
    mean2d: np.ndarray  # (N, 2)
    cov_cam: np.ndarray  # (N, 3, 3)
    jacobian: np.ndarray  # (N, 2, 3)
    cov2d: np.ndarray  # (N, 2, 2), dilated
    conic: np.ndarray  # (N, 3): A, B, C of the inverse 2D covariance
    half_extent: np.ndarray  # (N, 2): exact bounds of the cutoff ellipse
    visible: np.ndarray  # (N,) bool

    @property
    def depth(self) -> np.ndarray:
        return self.p_cam[:, 2]


def project_gaussians(
    means: np.ndarray,
    covariances: np.ndarray,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    dilation: float = 0.3,
    cutoff_sigma: float = 3.0,
) -> ProjectedGaussians:
    """Project N world-space Gaussians: mean2d = pinhole(p_cam), cov2d = J W Sigma W^T J^T + dilation I."""
    R = pose.rotation
    p_cam = means @ R.T + pose.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    in_front = z > intrinsics.near
    z_safe = np.where(in_front, z, 1.0)

    fx, fy = intrinsics.fx, intrinsics.fy
    J = np.zeros((len(means), 2, 3))
    J[:, 0, 0] = fx / z_safe
    J[:, 0, 2] = -fx * x / z_safe**2
    J[:, 1, 1] = fy / z_safe
    J[:, 1, 2] = -fy * y / z_safe**2

    cov_cam = R @ covariances @ R.T
    cov2d = J @ cov_cam @ np.swapaxes(J, -1, -2)
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, -1, -2))

    mean2d = np.stack([fx * x / z_safe + intrinsics.cx, fy * y / z_safe + intrinsics.cy], axis=-1)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    valid_det = det > 0
    det_safe = np.where(valid_det, det, 1.0)
    conic = np.stack([c / det_safe, -b / det_safe, a / det_safe], axis=-1)

    half_extent = cutoff_sigma * np.sqrt(np.maximum(np.stack([a, c], axis=-1), 0.0))
    lo = mean2d - half_extent
    hi = mean2d + half_extent
    on_screen = (hi[:, 0] >= 0) & (lo[:, 0] <= intrinsics.width - 1)
    on_screen &= (hi[:, 1] >= 0) & (lo[:, 1] <= intrinsics.height - 1)
    finite = np.all(np.isfinite(mean2d), axis=1) & np.all(np.isfinite(conic), axis=1)
    visible = in_front & valid_det & on_screen & finite

    return ProjectedGaussians(
        p_cam=p_cam,
        mean2d=mean2d,
        cov_cam=cov_cam,
        jacobian=J,
        cov2d=cov2d,
        conic=conic,
        half_extent=half_extent,
        visible=visible,
    )


@dataclass(frozen=True, eq=False)
class GaussianProjection:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    visible: bool


def project_gaussian(
    primitive: "GaussianPrimitive",
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    dilation: float = 0.3,
    cutoff_sigma: float = 3.0,
) -> GaussianProjection:
    """Screen-space mean, dilated 2D covariance, depth and visibility of a single primitive."""
    projected = project_gaussians(
        primitive.mean[None], primitive.covariance[None], pose, intrinsics, dilation, cutoff_sigma
    )
    return GaussianProjection(
        mean2d=projected.mean2d[0],
        cov2d=projected.cov2d[0],
        depth=float(projected.depth[0]),
        visible=bool(projected.visible[0]),
    )
