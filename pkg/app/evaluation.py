"""Trajectory, depth, rendering and reconstruction metrics, and the run's metrics report."""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import KDTree
from scipy.spatial.distance import cdist

from app import workers
from app.dataset_io import ASSOCIATION_TOLERANCE, associate
from app.errors import EvaluationError
from app.geometry import CameraPose, project_points
from app.models import CameraIntrinsics

logger = logging.getLogger(__name__)

CM = 100.0
MIN_ATE_POSES = 3
COMPLETION_THRESHOLD = 0.05
VISIBILITY_MARGIN = 0.02
BRUTE_FORCE_CHUNK = 1024


def align_positions(estimated: np.ndarray, reference: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form rotation and translation (no scale) taking `estimated` (N, 3) onto `reference` (N, 3)."""
    mu_e = estimated.mean(axis=0)
    mu_r = reference.mean(axis=0)
    W = (reference - mu_r).T @ (estimated - mu_e)
    U, _, Vt = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_r - R @ mu_e


def associated_positions(
    est_times: Sequence[float],
    est_poses: Sequence[CameraPose],
    gt_times: Sequence[float],
    gt_poses: Sequence[Optional[CameraPose]],
    tolerance: float = ASSOCIATION_TOLERANCE,
) -> Tuple[np.ndarray, np.ndarray]:
    """Camera centres of timestamp-associated pose pairs; ground-truth gaps are skipped."""
    known = [j for j, pose in enumerate(gt_poses) if pose is not None]
    pairs = associate(est_times, [gt_times[j] for j in known], tolerance)
    estimated = np.array([est_poses[i].camera_center for i, _ in pairs]).reshape(-1, 3)
    reference = np.array([gt_poses[known[j]].camera_center for _, j in pairs]).reshape(-1, 3)
    if len(pairs) < MIN_ATE_POSES:
        raise EvaluationError(
            f"ATE needs at least {MIN_ATE_POSES} associated poses; {len(est_poses)} estimated and "
            f"{len(known)} ground-truth poses gave {len(pairs)} pairs within {tolerance} s"
        )
    return estimated, reference


def translation_errors(estimated: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Per-pose distances (meters) after rigid alignment of the estimated positions."""
    if len(estimated) < MIN_ATE_POSES:
        raise EvaluationError(f"ATE needs at least {MIN_ATE_POSES} poses, got {len(estimated)}")
    R, t = align_positions(estimated, reference)
    aligned = estimated @ R.T + t
    return np.linalg.norm(aligned - reference, axis=1)


def ate_rmse(
    est_times: Sequence[float],
    est_poses: Sequence[CameraPose],
    gt_times: Sequence[float],
    gt_poses: Sequence[Optional[CameraPose]],
    tolerance: float = ASSOCIATION_TOLERANCE,
) -> float:
    """Absolute trajectory error RMSE in centimeters after rigid alignment."""
    estimated, reference = associated_positions(est_times, est_poses, gt_times, gt_poses, tolerance)
    errors = translation_errors(estimated, reference)
    return float(np.sqrt(np.mean(errors**2)) * CM)


def depth_l1(rendered: np.ndarray, sensor: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Mean absolute depth difference in centimeters over pixels with valid sensor depth."""
    valid = np.isfinite(sensor) & (sensor > 0) & np.isfinite(rendered)
    if mask is not None:
        valid &= mask
    if not valid.any():
        raise EvaluationError("depth L1 has no pixel with valid sensor depth")
    return float(np.mean(np.abs(rendered[valid] - sensor[valid])) * CM)


def psnr(rendered: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio on unit-range images; identical images give +inf."""
    mse = float(np.mean((np.asarray(rendered, dtype=float) - np.asarray(reference, dtype=float)) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def nearest_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Distance from every query point to its nearest reference point, via a k-d tree."""
    if len(reference) == 0:
        raise EvaluationError("Nearest-neighbour search against an empty point cloud")
    if len(query) == 0:
        return np.zeros(0)
    distances, _ = KDTree(reference).query(query, k=1, workers=workers.THREADS)
    return np.asarray(distances, dtype=float)


def brute_force_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Exhaustive nearest-neighbour distances; the oracle for `nearest_distances`."""
    if len(reference) == 0:
        raise EvaluationError("Nearest-neighbour search against an empty point cloud")
    chunks = [
        cdist(query[i : i + BRUTE_FORCE_CHUNK], reference).min(axis=1) for i in range(0, len(query), BRUTE_FORCE_CHUNK)
    ]
    return np.concatenate(chunks) if chunks else np.zeros(0)


def chamfer_to_surface(means: np.ndarray, surface: np.ndarray) -> float:
    """One-sided mean distance in centimeters from primitive means to the ground-truth surface points."""
    if len(means) == 0:
        raise EvaluationError("Chamfer distance of an empty map")
    return float(np.mean(nearest_distances(means, surface)) * CM)


@dataclass
class ReconMetrics:
    accuracy: float
    completion: float
    completion_ratio: float


def recon_metrics(
    predicted: np.ndarray, ground_truth: np.ndarray, threshold: float = COMPLETION_THRESHOLD
) -> ReconMetrics:
    """Point-based accuracy and completion (cm) and the percentage of ground truth within `threshold`."""
    if len(predicted) == 0 or len(ground_truth) == 0:
        raise EvaluationError(
            f"Reconstruction metrics need two non-empty clouds, got {len(predicted)} and {len(ground_truth)}"
        )
    to_gt = nearest_distances(predicted, ground_truth)
    to_pred = nearest_distances(ground_truth, predicted)
    return ReconMetrics(
        accuracy=float(np.mean(to_gt) * CM),
        completion=float(np.mean(to_pred) * CM),
        completion_ratio=float(np.mean(to_pred < threshold) * 100.0),
    )


def cull_unobserved(
    points: np.ndarray,
    poses: Sequence[CameraPose],
    depths: Sequence[np.ndarray],
    intrinsics: CameraIntrinsics,
    margin: float = VISIBILITY_MARGIN,
) -> np.ndarray:
    """Mask of points inside at least one camera frustum and not behind the observed depth by more than `margin`."""
    keep = np.zeros(len(points), dtype=bool)
    H, W = intrinsics.height, intrinsics.width
    for pose, depth in zip(poses, depths):
        uv, z = project_points(points, pose, intrinsics)
        cols = np.round(uv[:, 0])
        rows = np.round(uv[:, 1])
        inside = (z > intrinsics.near) & (z < intrinsics.far) & (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)
        index = np.nonzero(inside)[0]
        observed = depth[rows[index].astype(int), cols[index].astype(int)]
        visible = (observed > 0) & (z[index] <= observed + margin)
        keep[index[visible]] = True
    return keep


def _report_value(value):
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def write_metrics(metrics: Mapping[str, object], directory: Path) -> Tuple[Path, Path]:
    """Write metrics as key=value lines (metrics.txt) and as a JSON summary (metrics.json)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flat: Dict[str, object] = {}
    for key, value in metrics.items():
        if isinstance(value, ReconMetrics):
            flat.update({f"{key}.{k}": v for k, v in asdict(value).items()})
        else:
            flat[key] = value
    text_path = directory / "metrics.txt"
    text_path.write_text("".join(f"{key}={value}\n" for key, value in flat.items()))
    json_path = directory / "metrics.json"
    json_path.write_text(json.dumps({k: _report_value(v) for k, v in flat.items()}, indent=2, sort_keys=True) + "\n")
    for key, value in flat.items():
        logger.info(f"{key}: {value}")
    return text_path, json_path
