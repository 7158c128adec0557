"""Map lifecycle: dense initialization, opacity-gated spawning, densification and the mapping loop."""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from app.errors import DivergenceError, InitializationError, InvalidArgumentError
from app.gaussians import PARAMETER_NAMES, GaussianCloud, logit
from app.geometry import CameraPose, backproject_pixels, quat_to_rotmat
from app.losses import LossResult, mapping_loss
from app.models import CameraIntrinsics, LossWeights, MappingConfig, RasterSettings, UncertaintyConfig
from app.optimizer import Adam
from app.rasterizer import BlendRecord, GradientBundle, RenderOutput, observed_validity, render, render_backward
from app.uncertainty import run_cycle

if TYPE_CHECKING:
    from app.dataset_io import Frame

logger = logging.getLogger(__name__)


class Observation(Protocol):
    """Anything carrying a frame id, an RGB-D frame and a pose estimate (keyframe records do)."""

    frame_id: int
    frame: "Frame"
    pose: CameraPose


@dataclass
class _FirstFrame:
    frame_id: int
    frame: "Frame"
    pose: CameraPose


@dataclass
class DensifySummary:
    cloned: int = 0
    split: int = 0
    removed: int = 0

    @property
    def changed(self) -> bool:
        return bool(self.cloned or self.split or self.removed)


def learning_rates(config: MappingConfig, scene_extent: float) -> Dict[str, float]:
    lr = config.lr
    return {
        "means": lr.means * scene_extent,
        "log_scales": lr.scale,
        "quats": lr.rotation,
        "opacity_logits": lr.opacity,
        "sh": lr.sh,
    }


@dataclass
class MapState:
    """The map, its optimizer state and the bookkeeping of densification."""

    cloud: GaussianCloud
    optimizer: Adam
    config: MappingConfig
    intrinsics: CameraIntrinsics
    raster: RasterSettings
    scene_extent: float
    iteration: int = 0
    keyframe_cursor: int = 0
    grad_accum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_count: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if len(self.grad_accum) != len(self.cloud):
            self.grad_accum = np.zeros(len(self.cloud))
            self.grad_count = np.zeros(len(self.cloud), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.cloud)

    def check_consistency(self) -> None:
        """Raise if any parameter, optimizer or statistics array is not co-indexed with the primitives."""
        count = len(self.cloud)
        lengths = {name: len(getattr(self.cloud, name)) for name in PARAMETER_NAMES}
        lengths["uncertainty"] = len(self.cloud.uncertainty)
        lengths["grad_accum"] = len(self.grad_accum)
        lengths["grad_count"] = len(self.grad_count)
        for name in PARAMETER_NAMES:
            rows = self.optimizer.rows(name)
            if rows is not None:
                lengths[f"optimizer.{name}"] = rows
        bad = {name: n for name, n in lengths.items() if n != count}
        if bad:
            raise InvalidArgumentError(f"Map arrays out of sync with {count} primitives: {bad}")

    def add(self, new: GaussianCloud) -> None:
        """Append primitives and extend optimizer and statistics rows."""
        if len(new) == 0:
            return
        self.cloud = self.cloud.concat(new)
        self.optimizer.extend(len(new))
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(len(new))])
        self.grad_count = np.concatenate([self.grad_count, np.zeros(len(new), dtype=np.int64)])

    def keep(self, mask: np.ndarray) -> None:
        """Drop every primitive whose mask entry is False, with its optimizer and statistics rows."""
        self.cloud = self.cloud.select(mask)
        self.optimizer.select(mask)
        self.grad_accum = self.grad_accum[mask]
        self.grad_count = self.grad_count[mask]


def sample_pixels(
    depth: np.ndarray, intrinsics: CameraIntrinsics, stride: int, mask: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (M, 2) as (u, v) and depths (M,) on a stride grid where sensor depth is valid."""
    valid = observed_validity(depth, intrinsics)
    if mask is not None:
        valid &= mask
    grid = np.zeros_like(valid)
    grid[::stride, ::stride] = True
    rows, cols = np.nonzero(valid & grid)
    pixels = np.stack([cols, rows], axis=-1).astype(float)
    return pixels, depth[rows, cols].astype(float)


def primitives_from_pixels(
    frame: "Frame",
    pose: CameraPose,
    pixels: np.ndarray,
    depths: np.ndarray,
    intrinsics: CameraIntrinsics,
    config: MappingConfig,
    stride: int,
) -> GaussianCloud:
    """One isotropic primitive per pixel at its backprojection, coloured by the pixel."""
    if len(pixels) == 0:
        return GaussianCloud.empty(config.sh_degree)
    points = backproject_pixels(pixels, depths, pose, intrinsics)
    cols = pixels[:, 0].astype(int)
    rows = pixels[:, 1].astype(int)
    colors = np.clip(frame.color[rows, cols], 0.0, 1.0)
    scales = depths / intrinsics.fx * stride * config.initial_scale_factor
    return GaussianCloud.from_points(
        points, colors, scales, opacity=config.initial_opacity, sh_degree=config.sh_degree
    )


def _scene_extent(points: np.ndarray) -> float:
    radius = float(np.max(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    if radius > 0:
        return 1.1 * radius
    return float(max(np.linalg.norm(points[0]), 1.0))


def initialize_map(
    frame: "Frame",
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    config: MappingConfig,
    weights: Optional[LossWeights] = None,
    raster: Optional[RasterSettings] = None,
    iterations: Optional[int] = None,
    seed: int = 0,
) -> MapState:
    """Backproject the first frame densely and optimize the map against it for the initial iteration budget."""
    pixels, depths = sample_pixels(frame.depth, intrinsics, config.init_stride)
    if len(pixels) == 0:
        raise InitializationError("First frame has no valid depth; cannot initialize the map")

    cloud = primitives_from_pixels(frame, pose, pixels, depths, intrinsics, config, config.init_stride)
    extent = _scene_extent(cloud.means)
    state = MapState(
        cloud=cloud,
        optimizer=Adam(learning_rates(config, extent)),
        config=config,
        intrinsics=intrinsics,
        raster=raster or RasterSettings(),
        scene_extent=extent,
        rng=np.random.default_rng(seed),
    )
    logger.info(f"Initialized map with {len(cloud)} primitives (scene extent {extent:.3f} m)")

    budget = config.init_iterations if iterations is None else iterations
    if budget > 0:
        trace = map_step(state, [_FirstFrame(frame.index, frame, pose)], weights or LossWeights(), budget)
        logger.info(f"Initial optimization: loss {trace[0]:.5f} -> {trace[-1]:.5f} over {budget} iterations")
    state.check_consistency()
    return state


def spawn_gaussians(state: MapState, output: RenderOutput, frame: "Frame", pose: CameraPose) -> int:
    """Add primitives at sampled pixels the map does not yet cover (opacity below the spawn threshold)."""
    uncovered = output.opacity < state.config.spawn_threshold
    pixels, depths = sample_pixels(frame.depth, state.intrinsics, state.config.spawn_stride, uncovered)
    new = primitives_from_pixels(
        frame, pose, pixels, depths, state.intrinsics, state.config, state.config.spawn_stride
    )
    state.add(new)
    state.check_consistency()
    if len(new):
        logger.debug(f"Spawned {len(new)} primitives at uncovered pixels of frame {frame.index}")
    return len(new)


def densify_and_cull(state: MapState) -> DensifySummary:
    """Clone small and split large primitives with a high mean screen-space gradient, then remove transparent ones."""
    cfg = state.config.densify
    cloud = state.cloud
    count = len(cloud)
    grads = state.grad_accum / np.maximum(state.grad_count, 1)
    hot = grads >= cfg.grad_threshold
    large = cloud.scales.max(axis=1) > cfg.percent_dense * state.scene_extent
    clone = hot & ~large
    split = hot & large
    summary = DensifySummary(cloned=int(clone.sum()), split=int(split.sum()))

    if summary.cloned:
        state.add(cloud.select(clone))

    if summary.split:
        parents = cloud.select(np.repeat(np.nonzero(split)[0], cfg.split_count))
        samples = state.rng.normal(0.0, 1.0, size=(len(parents), 3)) * parents.scales
        rotations = quat_to_rotmat(parents.quats)
        parents.means = parents.means + np.einsum("nij,nj->ni", rotations, samples)
        parents.log_scales = parents.log_scales - np.log(cfg.split_factor)
        state.add(parents)

    keep = np.ones(len(state.cloud), dtype=bool)
    keep[:count] &= ~split
    keep &= state.cloud.opacity_logits >= logit(cfg.min_opacity)
    if not keep.any():
        logger.warning("Densification would remove every primitive; keeping the map as is")
    elif not keep.all():
        # split parents are replaced, not counted as removed
        summary.removed = int(np.count_nonzero(~keep)) - summary.split
        state.keep(keep)

    state.grad_accum[:] = 0.0
    state.grad_count[:] = 0
    state.check_consistency()
    if summary.changed:
        logger.info(
            f"Densify: cloned {summary.cloned}, split {summary.split}, removed {summary.removed}, "
            f"{len(state.cloud)} primitives"
        )
    return summary


def mapping_gradients(
    state: MapState, observation: Observation, weights: LossWeights
) -> Tuple[LossResult, GradientBundle, RenderOutput, BlendRecord]:
    """Render one observation, evaluate the mapping objective and backpropagate it."""
    frame = observation.frame
    output, record = render(state.cloud, observation.pose, state.intrinsics, frame.depth, state.raster)
    loss = mapping_loss(
        output, frame.color, frame.depth, record.observed_valid, state.cloud.log_scales, record.visible, weights
    )
    bundle = render_backward(
        state.cloud, observation.pose, state.intrinsics, record, loss.grad, weights.detach_variance_weights
    )
    if loss.d_log_scales is not None:
        bundle.d_scale += loss.d_log_scales
    return loss, bundle, output, record


def record_screen_gradients(state: MapState, bundle: GradientBundle, record: BlendRecord) -> None:
    """Accumulate the screen-space mean gradient norm (normalized device units) of visible primitives."""
    if bundle.d_mean2d is None:
        return
    scale = np.array([state.intrinsics.width / 2.0, state.intrinsics.height / 2.0])
    norms = np.linalg.norm(bundle.d_mean2d * scale, axis=1)
    state.grad_accum[record.visible] += norms[record.visible]
    state.grad_count[record.visible] += 1


def apply_map_update(state: MapState, bundle: GradientBundle) -> None:
    state.optimizer.step(state.cloud.parameters(), bundle.parameter_gradients())
    state.cloud.normalize_rotations()


def uncertainty_records(state: MapState, window: Sequence[Observation]) -> Dict[int, BlendRecord]:
    """Forward records of every window keyframe against its sensor depth."""
    records = {}
    for observation in window:
        _, record = render(
            state.cloud, observation.pose, state.intrinsics, observation.frame.depth, state.raster
        )
        records[observation.frame_id] = record
    return records


def map_step(
    state: MapState,
    window: Sequence[Observation],
    weights: LossWeights,
    iterations: int,
    uncertainty: Optional[UncertaintyConfig] = None,
) -> List[float]:
    """Optimize the map over the window for `iterations` steps, one keyframe per step in round-robin order.

    Poses are held fixed. With an uncertainty config, one accumulate/reduce cycle over the
    window follows the optimization. Returns the loss of every iteration.
    """
    if iterations == 0:
        return []
    if not window:
        raise InvalidArgumentError("map_step needs at least one keyframe in the window")

    trace: List[float] = []
    empty_terms = set()
    for it in range(iterations):
        observation = window[state.keyframe_cursor % len(window)]
        state.keyframe_cursor += 1
        loss, bundle, _, record = mapping_gradients(state, observation, weights)
        if not loss.is_finite:
            raise DivergenceError("mapping", it, loss.terms)
        empty_terms.update(loss.empty_terms)

        apply_map_update(state, bundle)
        record_screen_gradients(state, bundle, record)
        state.iteration += 1
        trace.append(loss.total)

        densify = state.config.densify
        if densify.enabled and state.iteration % densify.interval == 0:
            densify_and_cull(state)

    if empty_terms:
        logger.warning(f"Mapping terms with empty masks during this step: {sorted(empty_terms)}")
    if uncertainty is not None and uncertainty.enabled:
        run_cycle(state.cloud, uncertainty_records(state, window), uncertainty)
    state.check_consistency()
    return trace
