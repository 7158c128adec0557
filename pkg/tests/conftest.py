from pathlib import Path
from typing import Generator

import cv2
import numpy as np
import pytest

from app.geometry import CameraPose
from app.models import (
    CameraIntrinsics,
    DatasetConfig,
    MappingConfig,
    RunConfig,
    SceneSpec,
    SyntheticConfig,
    TrackerConfig,
    TrajectorySpec,
)
from app.startup import startup
from app.workers import reset_pool

SMALL = CameraIntrinsics(fx=32.0, fy=32.0, cx=16.0, cy=16.0, width=32, height=32)


@pytest.fixture(autouse=True)
def single_threaded() -> Generator[None, None, None]:
    """Every test starts and ends with the shared pool shut down and one worker thread."""
    startup(1)
    yield
    startup(1)
    reset_pool()


@pytest.fixture
def intrinsics() -> CameraIntrinsics:
    return SMALL


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


def small_synthetic(num_frames: int = 4, num_primitives: int = 400) -> SyntheticConfig:
    return SyntheticConfig(
        scene=SceneSpec(num_primitives=num_primitives, extent=4.0, num_objects=2),
        trajectory=TrajectorySpec(num_frames=num_frames, radius=0.5, arc=0.02),
    )


@pytest.fixture
def run_config(tmp_path: Path) -> RunConfig:
    """A tiny synthetic run: 32x32 frames, short budgets, a keyframe every second frame."""
    return RunConfig(
        output_dir=tmp_path / "run",
        intrinsics=SMALL,
        dataset=DatasetConfig(format="synthetic", synthetic=small_synthetic(num_frames=3)),
        tracker=TrackerConfig(iterations=3, keyframe_interval=2, ba_iterations=1),
        mapping=MappingConfig(iterations=3, init_iterations=5, init_stride=2, spawn_stride=4),
    )


def write_rgbd(root: Path, stem: str, color: np.ndarray, depth_m: np.ndarray, depth_scale: float = 5000.0):
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    bgr = cv2.cvtColor(np.round(color * 255).astype(np.uint8), cv2.COLOR_RGB2BGR)
    cv2.imwrite(str(root / "rgb" / f"{stem}.png"), bgr)
    cv2.imwrite(str(root / "depth" / f"{stem}.png"), np.round(depth_m * depth_scale).astype(np.uint16))


@pytest.fixture
def tum_dataset(tmp_path: Path) -> Path:
    """Three 32x32 RGB-D frames in TUM layout with ground truth, plus one rgb entry without depth."""
    root = tmp_path / "tum"
    rng = np.random.default_rng(3)
    times = [1.0, 1.1, 1.2]
    rgb_lines, depth_lines, gt_lines = ["# rgb"], ["# depth"], ["# timestamp tx ty tz qx qy qz qw"]
    for k, t in enumerate(times):
        color = rng.uniform(0.0, 1.0, (32, 32, 3))
        depth = np.full((32, 32), 1.5 + 0.1 * k)
        depth[0, 0] = 0.0
        write_rgbd(root, f"{t:.6f}", color, depth)
        rgb_lines.append(f"{t:.6f} rgb/{t:.6f}.png")
        depth_lines.append(f"{t + 0.005:.6f} depth/{t:.6f}.png")
        gt_lines.append(f"{t:.6f} {0.01 * k} 0 0 0 0 0 1")
    rgb_lines.append("5.000000 rgb/missing.png")
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    (root / "groundtruth.txt").write_text("\n".join(gt_lines) + "\n")
    return root


@pytest.fixture
def directory_dataset(tmp_path: Path) -> Path:
    """Two RGB-D pairs with non-numeric names plus one colour image without depth."""
    root = tmp_path / "frames"
    for stem in ("frame_a", "frame_b"):
        write_rgbd(root, stem, np.full((32, 32, 3), 0.5), np.full((32, 32), 2.0))
    write_rgbd(root, "frame_c", np.full((32, 32, 3), 0.5), np.full((32, 32), 2.0))
    (root / "depth" / "frame_c.png").unlink()
    return root


@pytest.fixture
def synthetic_config() -> SyntheticConfig:
    return small_synthetic()


@pytest.fixture
def identity_pose() -> CameraPose:
    return CameraPose.identity()
