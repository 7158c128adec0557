"""Frame-to-map pose tracking, keyframe descriptors, covisibility windows and sliding-window bundle adjustment."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import cv2
import numpy as np

from app.dataset_io import Frame
from app.errors import DivergenceError, InvalidArgumentError
from app.geometry import CameraPose
from app.image_io import to_gray
from app.losses import tracking_loss
from app.mapper import MapState, apply_map_update, mapping_gradients
from app.models import LossWeights, TrackerConfig
from app.optimizer import Adam
from app.rasterizer import GradientBundle, observed_validity, render, render_backward

logger = logging.getLogger(__name__)

DESCRIPTOR_TOLERANCE = 1e-6


@dataclass
class KeyframeRecord:
    frame_id: int
    frame: Frame
    pose: CameraPose
    descriptor: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.descriptor))
        if abs(norm - 1.0) > DESCRIPTOR_TOLERANCE:
            raise InvalidArgumentError(f"Keyframe {self.frame_id} descriptor has norm {norm}, expected 1")


@dataclass
class TrackingResult:
    pose: CameraPose
    loss: float
    initial_loss: float
    iterations: int
    degraded: bool = False
    invalid: bool = False
    trace: List[float] = field(default_factory=list)


def pose_optimizer(config: TrackerConfig) -> Adam:
    return Adam({"rotation": config.rotation_lr, "translation": config.translation_lr})


def pose_step(optimizer: Adam, grad: np.ndarray) -> np.ndarray:
    """Tangent update (rotation, translation) for one or a stack of pose gradients of shape (..., 6)."""
    return np.concatenate(
        [optimizer.update("rotation", grad[..., :3]), optimizer.update("translation", grad[..., 3:])], axis=-1
    )


def predict_pose(previous: Sequence[CameraPose]) -> CameraPose:
    """Constant-velocity guess: the last pose moved once more by the last relative motion.

    `previous` is ordered oldest first. One prior is returned as is; no prior gives the identity.
    """
    if not previous:
        return CameraPose.identity()
    last = previous[-1]
    if len(previous) == 1:
        return last
    before = previous[-2]
    return last.compose(before.inverse().compose(last))


def is_keyframe(index: int, config: TrackerConfig) -> bool:
    return index % config.keyframe_interval == 0


def track_frame(
    state: MapState,
    frame: Frame,
    initial_pose: CameraPose,
    weights: LossWeights,
    config: TrackerConfig,
    iterations: Optional[int] = None,
) -> TrackingResult:
    """Refine the pose of one frame against the frozen map by descending the tracking objective."""
    budget = config.iterations if iterations is None else iterations
    if not observed_validity(frame.depth, state.intrinsics).any():
        logger.warning(f"Frame {frame.index} has no valid depth; keeping the predicted pose")
        nan = float("nan")
        return TrackingResult(pose=initial_pose, loss=nan, initial_loss=nan, iterations=0, invalid=True)

    optimizer = pose_optimizer(config)
    pose = initial_pose
    trace: List[float] = []
    for it in range(max(budget, 1)):
        output, record = render(state.cloud, pose, state.intrinsics, frame.depth, state.raster)
        loss = tracking_loss(output, frame.color, frame.depth, record.observed_valid, weights)
        if not loss.is_finite:
            raise DivergenceError("tracking", it, loss.terms)
        trace.append(loss.total)
        if budget == 0:
            break
        bundle = render_backward(state.cloud, pose, state.intrinsics, record, loss.grad)
        pose = pose.retract(pose_step(optimizer, bundle.d_pose))

    degraded = trace[-1] > config.degraded_ratio * trace[0] if trace[0] > 0 else False
    if degraded:
        logger.warning(f"Tracking of frame {frame.index} degraded: loss {trace[0]:.5f} -> {trace[-1]:.5f}")
    return TrackingResult(
        pose=pose,
        loss=trace[-1],
        initial_loss=trace[0],
        iterations=budget,
        degraded=degraded,
        trace=trace,
    )


def compute_descriptor(color: np.ndarray, config: Optional[TrackerConfig] = None) -> np.ndarray:
    """Unit vector of a downsampled grayscale thumbnail followed by per-channel colour histograms."""
    config = config or TrackerConfig()
    grid = config.descriptor_grid
    thumbnail = cv2.resize(to_gray(color), (grid, grid), interpolation=cv2.INTER_AREA).astype(np.float64)
    pixels = np.clip(np.asarray(color, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    histograms = [
        np.histogram(pixels[:, c], bins=config.descriptor_bins, range=(0.0, 1.0))[0] / len(pixels) for c in range(3)
    ]
    descriptor = np.concatenate([thumbnail.ravel()] + histograms)
    return descriptor / np.linalg.norm(descriptor)


def select_window(
    pool: Sequence[KeyframeRecord], current_id: int, descriptor: np.ndarray, config: TrackerConfig
) -> List[int]:
    """Frame ids of the bundle-adjustment window.

    The current frame comes first, then the most recent keyframes (newest first), then the
    remaining keyframes by descending cosine similarity to `descriptor`, ties going to the
    more recent one. The window holds at most `window_size` ids.
    """
    window = [current_id]
    candidates = [k for k in range(len(pool)) if pool[k].frame_id != current_id]
    recent = candidates[::-1][: config.recent_keyframes]
    window += [pool[k].frame_id for k in recent]

    rest = [k for k in candidates if k not in recent]
    similarity = {k: float(np.dot(pool[k].descriptor, descriptor)) for k in rest}
    for k in sorted(rest, key=lambda k: (-similarity[k], -k)):
        window.append(pool[k].frame_id)

    seen = set()
    unique = [i for i in window if not (i in seen or seen.add(i))]
    return unique[: config.window_size]


def sliding_ba(
    state: MapState,
    window: Sequence[KeyframeRecord],
    weights: LossWeights,
    iterations: int,
    config: TrackerConfig,
) -> List[float]:
    """Jointly refine the window poses and the map on the summed mapping objective of the window.

    With `freeze_oldest`, the pose of the keyframe with the smallest frame id stays fixed. Keyframe
    poses are updated in place. Returns the summed loss of every iteration.
    """
    if iterations == 0 or not window:
        return []

    frozen = min(range(len(window)), key=lambda k: window[k].frame_id) if config.freeze_oldest else None
    optimizer = pose_optimizer(config)
    trace: List[float] = []
    for it in range(iterations):
        total = 0.0
        bundle: Optional[GradientBundle] = None
        pose_grads = np.zeros((len(window), 6))
        for k, keyframe in enumerate(window):
            loss, grads, _, _ = mapping_gradients(state, keyframe, weights)
            if not loss.is_finite:
                raise DivergenceError("bundle adjustment", it, loss.terms)
            total += loss.total
            pose_grads[k] = grads.d_pose
            bundle = grads if bundle is None else bundle + grads

        if frozen is not None:
            pose_grads[frozen] = 0.0
        deltas = pose_step(optimizer, pose_grads)
        apply_map_update(state, bundle)
        for k, keyframe in enumerate(window):
            if k != frozen:
                keyframe.pose = keyframe.pose.retract(deltas[k])
        trace.append(total)

    state.check_consistency()
    logger.debug(f"Bundle adjustment over {len(window)} keyframes: loss {trace[0]:.5f} -> {trace[-1]:.5f}")
    return trace
