"""Synthetic RGB-D sequences with exact ground truth: a textured room with floor objects and a circular camera path."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from app.dataset_io import FrameSequence
from app.errors import InvalidArgumentError
from app.gaussians import GaussianCloud
from app.geometry import CameraPose, rotmat_to_quat
from app.models import CameraIntrinsics, NoiseSpec, RasterSettings, SceneSpec, SyntheticConfig, TrajectorySpec
from app.rasterizer import render_reference

logger = logging.getLogger(__name__)

OBJECT_SHARE = 0.15
OBJECT_RADIUS = 0.25
DEPTH_OPACITY = 0.5
# (normal axis, sign) of the six room faces; +y is the floor (camera y points down)
FACES = ((0, -1.0), (0, 1.0), (1, -1.0), (1, 1.0), (2, -1.0), (2, 1.0))


@dataclass
class _Face:
    axis: int
    sign: float
    frequencies: np.ndarray
    phases: np.ndarray

    def tangents(self) -> Tuple[int, int]:
        a, b = [k for k in range(3) if k != self.axis]
        return a, b

    def sample(self, count: int, half: float, rng: np.random.Generator) -> np.ndarray:
        a, b = self.tangents()
        points = np.empty((count, 3))
        points[:, self.axis] = self.sign * half
        points[:, a] = rng.uniform(-half, half, count)
        points[:, b] = rng.uniform(-half, half, count)
        return points

    def texture(self, points: np.ndarray) -> np.ndarray:
        a, b = self.tangents()
        u, v = points[:, a], points[:, b]
        color = 0.5 + 0.3 * np.sin(2 * np.pi * self.frequencies[None, :, 0] * u[:, None] + self.phases[None, :, 0])
        color *= 0.8 + 0.2 * np.cos(2 * np.pi * self.frequencies[None, :, 1] * v[:, None] + self.phases[None, :, 1])
        return np.clip(color, 0.05, 0.95)

    def rotation(self) -> np.ndarray:
        a, b = self.tangents()
        R = np.zeros((3, 3))
        R[a, 0] = 1.0
        R[b, 1] = 1.0
        R[self.axis, 2] = 1.0
        if np.linalg.det(R) < 0:
            R[:, 0] *= -1.0
        return rotmat_to_quat(R)


@dataclass
class _Sphere:
    center: np.ndarray
    radius: float
    color: np.ndarray

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        d = rng.normal(size=(count, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d


@dataclass
class SyntheticScene:
    """Ground-truth primitives plus the analytic surfaces they were drawn from."""

    cloud: GaussianCloud
    faces: List[_Face]
    spheres: List[_Sphere]
    half_extent: float

    def surface_points(self, count: int, seed: int = 0) -> np.ndarray:
        """Uniform samples of the room faces and object spheres (for reconstruction metrics)."""
        rng = np.random.default_rng(seed)
        face_area = (2 * self.half_extent) ** 2
        sphere_areas = [4 * np.pi * s.radius**2 for s in self.spheres]
        areas = np.array([face_area] * len(self.faces) + sphere_areas)
        counts = np.floor(count * areas / areas.sum()).astype(int)
        counts[0] += count - counts.sum()
        parts = [face.sample(n, self.half_extent, rng) for face, n in zip(self.faces, counts)]
        parts += [sphere.sample(n, rng) for sphere, n in zip(self.spheres, counts[len(self.faces) :])]
        return np.concatenate(parts)


def build_scene(spec: SceneSpec, rng: np.random.Generator, sh_degree: int = 0) -> SyntheticScene:
    half = spec.extent / 2.0
    object_budget = int(OBJECT_SHARE * spec.num_primitives) if spec.num_objects else 0
    wall_budget = spec.num_primitives - object_budget

    faces = [
        _Face(axis, sign, rng.uniform(0.3, 1.5, size=(3, 2)), rng.uniform(0, 2 * np.pi, size=(3, 2)))
        for axis, sign in FACES
    ]
    face_counts = np.full(len(faces), wall_budget // len(faces))
    face_counts[: wall_budget % len(faces)] += 1

    means, colors, scales, quats = [], [], [], []
    for face, n in zip(faces, face_counts):
        points = face.sample(int(n), half, rng)
        size = spec.primitive_scale or 0.6 * spec.extent / np.sqrt(max(int(n), 1))
        means.append(points)
        colors.append(np.clip(face.texture(points) + rng.normal(0, 0.03, size=points.shape), 0.0, 1.0))
        scales.append(np.tile([size, size, spec.flatness * size], (len(points), 1)))
        quats.append(np.tile(face.rotation(), (len(points), 1)))

    spheres = []
    if spec.num_objects:
        per_object = np.full(spec.num_objects, object_budget // spec.num_objects)
        per_object[: object_budget % spec.num_objects] += 1
        for n in per_object:
            xz = rng.uniform(-half / 2, half / 2, size=2)
            sphere = _Sphere(
                center=np.array([xz[0], half - OBJECT_RADIUS, xz[1]]),
                radius=OBJECT_RADIUS,
                color=rng.uniform(0.2, 0.9, size=3),
            )
            spheres.append(sphere)
            points = sphere.sample(int(n), rng)
            size = spec.primitive_scale or 0.6 * OBJECT_RADIUS * np.sqrt(4 * np.pi / max(int(n), 1))
            means.append(points)
            colors.append(np.clip(sphere.color + rng.normal(0, 0.05, size=points.shape), 0.0, 1.0))
            scales.append(np.full((len(points), 3), size))
            quats.append(np.tile([1.0, 0.0, 0.0, 0.0], (len(points), 1)))

    cloud = GaussianCloud.from_points(
        np.concatenate(means),
        np.concatenate(colors),
        np.concatenate(scales),
        opacity=spec.opacity,
        quats=np.concatenate(quats),
        sh_degree=sh_degree,
    )
    return SyntheticScene(cloud=cloud, faces=faces, spheres=spheres, half_extent=half)


def circle_trajectory(spec: TrajectorySpec) -> List[CameraPose]:
    """Poses on a horizontal circle around the room centre, each looking at the circle centre.

    `arc` is the fraction of the circle covered; a full circle spaces the frames evenly around it.
    """
    length = 2 * np.pi * spec.radius * spec.arc
    if spec.num_frames > 1 and length == 0:
        raise InvalidArgumentError("Degenerate trajectory: zero path length for more than one frame")
    centre = np.array([0.0, spec.height, 0.0])
    # a closed loop would repeat its first pose at the end
    steps = spec.num_frames if spec.arc >= 1.0 else max(spec.num_frames - 1, 1)
    poses = []
    for k in range(spec.num_frames):
        theta = 2 * np.pi * spec.arc * k / steps
        position = centre + spec.radius * np.array([np.cos(theta), 0.0, np.sin(theta)])
        # a zero radius has no inward direction; look along +z instead
        target = centre if spec.radius > 0 else position + np.array([0.0, 0.0, 1.0])
        poses.append(CameraPose.look_at(position, target))
    return poses


def render_observation(
    cloud: GaussianCloud,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    raster: RasterSettings,
    noise: NoiseSpec,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Colour and sensor depth of the ground truth; depth is the alpha depth where opacity reaches 0.5."""
    output = render_reference(cloud, pose, intrinsics, None, raster)
    color = output.color
    depth = np.where(output.opacity >= DEPTH_OPACITY, output.alpha_depth, 0.0)
    if rng is not None and noise.depth_sigma > 0:
        depth = np.where(depth > 0, depth + rng.normal(0.0, noise.depth_sigma, depth.shape), 0.0)
    if rng is not None and noise.color_sigma > 0:
        color = np.clip(color + rng.normal(0.0, noise.color_sigma, color.shape), 0.0, 1.0)
    return color, depth


class SyntheticSequence(FrameSequence):
    """Frames rendered on demand from the ground-truth primitives with the reference renderer."""

    def __init__(
        self,
        scene: SyntheticScene,
        poses: List[CameraPose],
        intrinsics: CameraIntrinsics,
        config: SyntheticConfig,
        raster: Optional[RasterSettings] = None,
        seed: int = 0,
        scale: float = 1.0,
        max_frames: Optional[int] = None,
    ):
        super().__init__(intrinsics, scale, max_frames)
        self.scene = scene
        self.poses = poses
        self.config = config
        self.raster = raster or RasterSettings()
        self.seed = seed
        self.timestamps = np.arange(len(poses)) / config.trajectory.frame_rate

    @property
    def gt_cloud(self) -> GaussianCloud:
        return self.scene.cloud

    def _count(self) -> int:
        return len(self.poses)

    def _load_raw(self, k: int):
        rng = np.random.default_rng([self.seed, k])
        color, depth = render_observation(
            self.scene.cloud, self.poses[k], self.source_intrinsics, self.raster, self.config.noise, rng
        )
        return self.timestamps[k], color, depth, self.poses[k]

    @property
    def has_ground_truth(self) -> bool:
        return True

    def ground_truth(self):
        return self.timestamps[: len(self)], list(self.poses[: len(self)])


def generate_synthetic_sequence(
    config: SyntheticConfig,
    intrinsics: CameraIntrinsics,
    seed: int = 0,
    raster: Optional[RasterSettings] = None,
    sh_degree: int = 0,
    scale: float = 1.0,
    max_frames: Optional[int] = None,
) -> SyntheticSequence:
    """Build the ground-truth scene and trajectory from the seed; frames render lazily and reproducibly."""
    rng = np.random.default_rng(seed)
    scene = build_scene(config.scene, rng, sh_degree)
    poses = circle_trajectory(config.trajectory)
    logger.info(
        f"Synthetic scene: {len(scene.cloud)} primitives, {len(scene.spheres)} objects, {len(poses)} frames"
    )
    return SyntheticSequence(scene, poses, intrinsics, config, raster, seed, scale, max_frames)
