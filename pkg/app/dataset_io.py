"""RGB-D frame sequences: TUM-format and directory-format loaders, and TUM trajectory files."""

import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import DatasetError
from app.geometry import CameraPose
from app.image_io import downsample_color, downsample_depth, read_color, read_depth
from app.models import CameraIntrinsics

logger = logging.getLogger(__name__)

ASSOCIATION_TOLERANCE = 0.02
DEFAULT_FRAME_RATE = 30.0


@dataclass(frozen=True, eq=False)
class Frame:
    """One RGB-D observation; depth is in meters with 0 marking invalid pixels."""

    index: int
    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    gt_pose: Optional[CameraPose] = None

    @property
    def rgb(self) -> np.ndarray:
        return self.color

    @property
    def valid_depth(self) -> np.ndarray:
        return self.depth > 0

    @classmethod
    def create(
        cls,
        index: int,
        timestamp: float,
        color: np.ndarray,
        depth: np.ndarray,
        intrinsics: CameraIntrinsics,
        gt_pose: Optional[CameraPose] = None,
    ) -> "Frame":
        """Check dimensions against the intrinsics and zero out depth outside (near, far)."""
        shape = (intrinsics.height, intrinsics.width)
        if color.shape != shape + (3,):
            raise DatasetError(f"Frame {index}: colour is {color.shape}, expected {shape + (3,)}")
        if depth.shape != shape:
            raise DatasetError(f"Frame {index}: depth is {depth.shape}, expected {shape}")
        depth = np.where(np.isfinite(depth), depth, 0.0)
        depth = np.where((depth > intrinsics.near) & (depth < intrinsics.far), depth, 0.0)
        return cls(
            index=index,
            timestamp=float(timestamp),
            color=np.clip(color, 0.0, 1.0),
            depth=depth,
            gt_pose=gt_pose,
        )


def parse_index(path: Path) -> List[Tuple[float, List[str]]]:
    """Entries of a TUM index file: (timestamp, remaining fields). '#' lines and blank lines are skipped."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DatasetError(f"Cannot read index file {path}: {e}") from e

    entries = []
    for number, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.replace(",", " ").split()
        try:
            timestamp = float(fields[0])
        except ValueError as e:
            raise DatasetError(f"{path}:{number}: bad timestamp '{fields[0]}'") from e
        entries.append((timestamp, fields[1:]))
    return entries


def associate(
    first: Sequence[float], second: Sequence[float], max_difference: float = ASSOCIATION_TOLERANCE
) -> List[Tuple[int, int]]:
    """One-to-one index pairs of closest timestamps within `max_difference`, in order of the first list."""
    a = np.asarray(first, dtype=float)
    b = np.asarray(second, dtype=float)
    if len(a) == 0 or len(b) == 0:
        return []
    diff = np.abs(a[:, None] - b[None, :])
    rows, cols = np.nonzero(diff < max_difference)
    order = np.lexsort((cols, rows, diff[rows, cols]))
    used_a, used_b = set(), set()
    matches = []
    for k in order:
        i, j = int(rows[k]), int(cols[k])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches.append((i, j))
    return sorted(matches)


def read_tum_trajectory(path: Path) -> Tuple[np.ndarray, List[CameraPose]]:
    """Timestamps and world-to-camera poses from 'timestamp tx ty tz qx qy qz qw' lines (camera-to-world)."""
    timestamps, poses = [], []
    for timestamp, fields in parse_index(path):
        if len(fields) != 7:
            raise DatasetError(f"{path}: expected 7 pose values after timestamp {timestamp}, got {len(fields)}")
        values = np.array([float(v) for v in fields])
        timestamps.append(timestamp)
        poses.append(CameraPose.from_tum(values[:3], values[3:]))
    return np.array(timestamps), poses


def format_tum_line(timestamp: float, pose: CameraPose) -> str:
    position, quat = pose.to_tum()
    values = " ".join(f"{v:.9f}" for v in np.concatenate([position, quat]))
    return f"{timestamp:.6f} {values}"


def write_tum_trajectory(path: Path, timestamps: Sequence[float], poses: Sequence[CameraPose]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# timestamp tx ty tz qx qy qz qw"] + [format_tum_line(t, p) for t, p in zip(timestamps, poses)]
    path.write_text("\n".join(lines) + "\n")
    return path


class FrameSequence:
    """A lazily loaded sequence of frames; iteration prefetches the next frame on a background thread."""

    def __init__(self, intrinsics: CameraIntrinsics, scale: float = 1.0, max_frames: Optional[int] = None):
        self.source_intrinsics = intrinsics
        self.intrinsics = intrinsics if scale == 1.0 else intrinsics.scaled(scale)
        self.max_frames = max_frames

    def __len__(self) -> int:
        count = self._count()
        return count if self.max_frames is None else min(count, self.max_frames)

    def _count(self) -> int:
        raise NotImplementedError

    def _load_raw(self, k: int) -> Tuple[float, np.ndarray, np.ndarray, Optional[CameraPose]]:
        raise NotImplementedError

    def load_frame(self, k: int) -> Frame:
        if not 0 <= k < len(self):
            raise IndexError(f"Frame {k} out of range for a sequence of {len(self)}")
        timestamp, color, depth, gt_pose = self._load_raw(k)
        if self.intrinsics is not self.source_intrinsics:
            color = downsample_color(color, self.intrinsics.width, self.intrinsics.height)
            depth = downsample_depth(depth, self.intrinsics.width, self.intrinsics.height)
        return Frame.create(k, timestamp, color, depth, self.intrinsics, gt_pose)

    def __iter__(self) -> Iterator[Frame]:
        count = len(self)
        if count == 0:
            return
        with ThreadPoolExecutor(max_workers=1, thread_name_prefix="prefetch") as pool:
            pending: Future = pool.submit(self.load_frame, 0)
            for k in range(count):
                frame = pending.result()
                if k + 1 < count:
                    pending = pool.submit(self.load_frame, k + 1)
                yield frame

    @property
    def has_ground_truth(self) -> bool:
        return False

    def ground_truth(self) -> Tuple[np.ndarray, List[Optional[CameraPose]]]:
        """Timestamps and ground-truth poses of every frame (None where unknown)."""
        raise NotImplementedError


class TumSequence(FrameSequence):
    """rgb.txt / depth.txt / optional groundtruth.txt, associated by nearest timestamp."""

    def __init__(
        self,
        path: Path,
        intrinsics: CameraIntrinsics,
        scale: float = 1.0,
        max_frames: Optional[int] = None,
        tolerance: float = ASSOCIATION_TOLERANCE,
    ):
        super().__init__(intrinsics, scale, max_frames)
        self.root = Path(path)
        for name in ("rgb.txt", "depth.txt"):
            if not (self.root / name).is_file():
                raise DatasetError(f"{self.root} has no {name}")

        rgb = parse_index(self.root / "rgb.txt")
        depth = parse_index(self.root / "depth.txt")
        pairs = associate([t for t, _ in rgb], [t for t, _ in depth], tolerance)
        self.skipped = (len(rgb) - len(pairs)) + (len(depth) - len(pairs))
        if not pairs:
            raise DatasetError(f"{self.root}: no rgb/depth pairs within {tolerance} s")
        if self.skipped:
            logger.warning(f"{self.root}: skipped {self.skipped} unmatched rgb/depth entries")

        self.timestamps = np.array([rgb[i][0] for i, _ in pairs])
        self.rgb_paths = [self.root / rgb[i][1][0] for i, _ in pairs]
        self.depth_paths = [self.root / depth[j][1][0] for _, j in pairs]

        self.gt_poses: List[Optional[CameraPose]] = [None] * len(pairs)
        gt_path = self.root / "groundtruth.txt"
        self._has_gt = gt_path.is_file()
        if self._has_gt:
            gt_times, gt_poses = read_tum_trajectory(gt_path)
            for i, j in associate(self.timestamps, gt_times, tolerance):
                self.gt_poses[i] = gt_poses[j]
        else:
            logger.info(f"{self.root}: no groundtruth.txt, trajectory evaluation disabled")
        logger.info(f"Loaded TUM index of {len(pairs)} frames from {self.root}")

    def _count(self) -> int:
        return len(self.timestamps)

    def _load_raw(self, k: int):
        color = read_color(self.rgb_paths[k])
        depth = read_depth(self.depth_paths[k], self.source_intrinsics.depth_scale)
        return self.timestamps[k], color, depth, self.gt_poses[k]

    @property
    def has_ground_truth(self) -> bool:
        return self._has_gt

    def ground_truth(self):
        return self.timestamps[: len(self)], self.gt_poses[: len(self)]


class DirectorySequence(FrameSequence):
    """rgb/ and depth/ folders of PNGs paired by file stem; stems that parse as numbers are timestamps."""

    def __init__(
        self,
        path: Path,
        intrinsics: CameraIntrinsics,
        scale: float = 1.0,
        max_frames: Optional[int] = None,
        frame_rate: float = DEFAULT_FRAME_RATE,
    ):
        super().__init__(intrinsics, scale, max_frames)
        self.root = Path(path)
        rgb_dir, depth_dir = self.root / "rgb", self.root / "depth"
        if not rgb_dir.is_dir() or not depth_dir.is_dir():
            raise DatasetError(f"{self.root} must contain rgb/ and depth/ folders")

        rgb: Dict[str, Path] = {p.stem: p for p in rgb_dir.glob("*.png")}
        depth: Dict[str, Path] = {p.stem: p for p in depth_dir.glob("*.png")}
        stems = sorted(set(rgb) & set(depth), key=_stem_key)
        self.skipped = len(set(rgb) ^ set(depth))
        if not stems:
            raise DatasetError(f"{self.root}: no rgb/depth PNG pairs with matching names")
        if self.skipped:
            logger.warning(f"{self.root}: skipped {self.skipped} unpaired images")

        self.rgb_paths = [rgb[s] for s in stems]
        self.depth_paths = [depth[s] for s in stems]
        try:
            self.timestamps = np.array([float(s) for s in stems])
        except ValueError:
            logger.debug(f"{self.root}: image names are not timestamps; assuming {frame_rate} Hz")
            self.timestamps = np.arange(len(stems)) / frame_rate

        self.gt_poses: List[Optional[CameraPose]] = [None] * len(stems)
        gt_path = self.root / "groundtruth.txt"
        self._has_gt = gt_path.is_file()
        if self._has_gt:
            gt_times, gt_poses = read_tum_trajectory(gt_path)
            for i, j in associate(self.timestamps, gt_times):
                self.gt_poses[i] = gt_poses[j]

    def _count(self) -> int:
        return len(self.rgb_paths)

    def _load_raw(self, k: int):
        color = read_color(self.rgb_paths[k])
        depth = read_depth(self.depth_paths[k], self.source_intrinsics.depth_scale)
        return self.timestamps[k], color, depth, self.gt_poses[k]

    @property
    def has_ground_truth(self) -> bool:
        return self._has_gt

    def ground_truth(self):
        return self.timestamps[: len(self)], self.gt_poses[: len(self)]


def _stem_key(stem: str):
    # numeric stems sort by value, the rest by name after them
    if stem.replace(".", "", 1).isdigit():
        return (0, float(stem), stem)
    return (1, 0.0, stem)


def load_tum_sequence(
    path: Path, intrinsics: Optional[CameraIntrinsics] = None, scale: float = 1.0, max_frames: Optional[int] = None
) -> TumSequence:
    return TumSequence(path, intrinsics or CameraIntrinsics(), scale, max_frames)
