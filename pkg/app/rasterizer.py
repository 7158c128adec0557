"""Tiled alpha-blending rasterizer: colour, alpha depth, median depth, opacity and depth-variance maps.

Blending visits visible primitives in ascending camera depth (stable, ties by primitive id).
Tiles are independent, so both passes map over tiles on the shared worker pool and reduce
their results in fixed tile order.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import InvalidArgumentError
from app.gaussians import (
    GaussianCloud,
    GaussianPrimitive,
    eval_colors,
    eval_colors_backward,
    sigmoid,
)
from app.geometry import HAT_BASIS, CameraPose, ProjectedGaussians, project_gaussians, quat_to_rotmat
from app.models import CameraIntrinsics, RasterSettings
from app.workers import parallel_map

logger = logging.getLogger(__name__)

MEDIAN_TRANSMITTANCE = 0.5

Primitives = Union[GaussianCloud, Sequence[GaussianPrimitive]]


def as_cloud(primitives: Primitives) -> GaussianCloud:
    if isinstance(primitives, GaussianCloud):
        return primitives
    if not primitives:
        return GaussianCloud.empty()
    degree = int(round(np.sqrt(len(primitives[0].sh_coeffs)))) - 1
    return GaussianCloud.from_primitives(primitives, sh_degree=degree)


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha_depth: np.ndarray
    median_depth: np.ndarray
    opacity: np.ndarray
    uncertainty: np.ndarray
    per_pixel_count: np.ndarray
    median_valid: np.ndarray
    uncertainty_present: bool = False

    @classmethod
    def blank(cls, height: int, width: int, uncertainty_present: bool = False) -> "RenderOutput":
        return cls(
            color=np.zeros((height, width, 3)),
            alpha_depth=np.zeros((height, width)),
            median_depth=np.zeros((height, width)),
            opacity=np.zeros((height, width)),
            uncertainty=np.zeros((height, width)),
            per_pixel_count=np.zeros((height, width), dtype=np.int64),
            median_valid=np.zeros((height, width), dtype=bool),
            uncertainty_present=uncertainty_present,
        )

    @property
    def depth_valid(self) -> np.ndarray:
        return self.per_pixel_count > 0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.opacity.shape


@dataclass
class TileBlend:
    """Blend lists of one tile: K primitives (depth order) by P pixels (row-major within the tile)."""

    y0: int
    y1: int
    x0: int
    x1: int
    ids: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    grad_mask: np.ndarray
    median_slot: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return self.alpha * self.transmittance


@dataclass
class BlendRecord:
    """Everything the backward pass and the uncertainty accumulation need from a forward pass."""

    num_primitives: int
    image_shape: Tuple[int, int]
    tiles: List[TileBlend]
    owner_id: np.ndarray
    owner_weight: np.ndarray
    owner_depth: np.ndarray
    visible: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    color_unclamped: np.ndarray
    projection: ProjectedGaussians
    observed_depth: Optional[np.ndarray]
    observed_valid: np.ndarray
    pose: CameraPose
    settings: RasterSettings


@dataclass
class ImageGradients:
    """Upstream gradients of a scalar loss with respect to the rendered maps; None means zero."""

    color: Optional[np.ndarray] = None
    alpha_depth: Optional[np.ndarray] = None
    median_depth: Optional[np.ndarray] = None
    opacity: Optional[np.ndarray] = None
    uncertainty: Optional[np.ndarray] = None

    def __add__(self, other: "ImageGradients") -> "ImageGradients":
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return ImageGradients(
            color=add(self.color, other.color),
            alpha_depth=add(self.alpha_depth, other.alpha_depth),
            median_depth=add(self.median_depth, other.median_depth),
            opacity=add(self.opacity, other.opacity),
            uncertainty=add(self.uncertainty, other.uncertainty),
        )

    def scaled(self, factor: float) -> "ImageGradients":
        def scale(a):
            return None if a is None else factor * a

        return ImageGradients(
            color=scale(self.color),
            alpha_depth=scale(self.alpha_depth),
            median_depth=scale(self.median_depth),
            opacity=scale(self.opacity),
            uncertainty=scale(self.uncertainty),
        )


@dataclass
class GradientBundle:
    """Gradients co-indexed with the primitives plus the 6-vector pose gradient (rotation, translation).

    Parameter gradients are with respect to the stored parameterization: means, log-scales,
    raw quaternions, opacity logits and SH coefficients. `d_mean2d` is the screen-space
    gradient used by densification.
    """

    d_mean: np.ndarray
    d_scale: np.ndarray
    d_rotation: np.ndarray
    d_opacity: np.ndarray
    d_sh: np.ndarray
    d_pose: np.ndarray = field(default_factory=lambda: np.zeros(6))
    d_mean2d: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, count: int, sh_coefficients: int = 1) -> "GradientBundle":
        return cls(
            d_mean=np.zeros((count, 3)),
            d_scale=np.zeros((count, 3)),
            d_rotation=np.zeros((count, 4)),
            d_opacity=np.zeros(count),
            d_sh=np.zeros((count, sh_coefficients, 3)),
            d_pose=np.zeros(6),
            d_mean2d=np.zeros((count, 2)),
        )

    def __len__(self) -> int:
        return len(self.d_mean)

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        if len(self) != len(other):
            raise InvalidArgumentError(f"Cannot add gradients of {len(self)} and {len(other)} primitives")
        mean2d = None
        if self.d_mean2d is not None and other.d_mean2d is not None:
            mean2d = self.d_mean2d + other.d_mean2d
        return GradientBundle(
            d_mean=self.d_mean + other.d_mean,
            d_scale=self.d_scale + other.d_scale,
            d_rotation=self.d_rotation + other.d_rotation,
            d_opacity=self.d_opacity + other.d_opacity,
            d_sh=self.d_sh + other.d_sh,
            d_pose=self.d_pose + other.d_pose,
            d_mean2d=mean2d,
        )

    def parameter_gradients(self) -> dict:
        """Gradients keyed like `GaussianCloud.parameters()`."""
        return {
            "means": self.d_mean,
            "log_scales": self.d_scale,
            "quats": self.d_rotation,
            "opacity_logits": self.d_opacity,
            "sh": self.d_sh,
        }

    def is_finite(self) -> bool:
        arrays = [self.d_mean, self.d_scale, self.d_rotation, self.d_opacity, self.d_sh, self.d_pose]
        return all(bool(np.all(np.isfinite(a))) for a in arrays)


def observed_validity(observed_depth: Optional[np.ndarray], intrinsics: CameraIntrinsics) -> np.ndarray:
    shape = (intrinsics.height, intrinsics.width)
    if observed_depth is None:
        return np.zeros(shape, dtype=bool)
    D = np.asarray(observed_depth, dtype=float)
    if D.shape != shape:
        raise InvalidArgumentError(f"Observed depth has shape {D.shape}, expected {shape}")
    with np.errstate(invalid="ignore"):
        return np.isfinite(D) & (D > intrinsics.near) & (D < intrinsics.far)


def _alpha(
    dx: np.ndarray, dy: np.ndarray, conic: np.ndarray, sigma: np.ndarray, settings: RasterSettings
) -> Tuple[np.ndarray, np.ndarray]:
    """Clamped per-(primitive, pixel) alpha and the mask where alpha is differentiable."""
    A, B, C = conic[:, 0:1], conic[:, 1:2], conic[:, 2:3]
    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
    inside = power >= -0.5 * settings.cutoff_sigma**2
    raw = sigma[:, None] * np.exp(power)
    alpha = np.minimum(raw, settings.max_alpha)
    keep = inside & (alpha >= settings.min_alpha)
    return np.where(keep, alpha, 0.0), keep & (raw < settings.max_alpha)


def _exclusive_transmittance(alpha: np.ndarray) -> np.ndarray:
    trans = np.ones_like(alpha)
    trans[1:] = np.cumprod(1.0 - alpha, axis=0)[:-1]
    return trans


def _composite(alpha: np.ndarray, termination: float) -> Tuple[np.ndarray, np.ndarray]:
    """Transmittance before each primitive, with primitives past the termination point removed."""
    trans = _exclusive_transmittance(alpha)
    if termination > 0:
        active = trans >= termination
        if not np.all(active):
            alpha = np.where(active, alpha, 0.0)
            trans = _exclusive_transmittance(alpha)
    return alpha, trans


@dataclass
class _BlendMaps:
    color: np.ndarray
    alpha_depth: np.ndarray
    median_depth: np.ndarray
    median_slot: np.ndarray
    opacity: np.ndarray
    uncertainty: np.ndarray
    count: np.ndarray
    owner_slot: np.ndarray
    owner_weight: np.ndarray


def _reduce_blend(
    alpha: np.ndarray,
    trans: np.ndarray,
    colors: np.ndarray,
    depths: np.ndarray,
    observed: Optional[np.ndarray],
    observed_valid: np.ndarray,
) -> _BlendMaps:
    P = alpha.shape[1]
    if alpha.shape[0] == 0:
        return _BlendMaps(
            color=np.zeros((P, 3)),
            alpha_depth=np.zeros(P),
            median_depth=np.zeros(P),
            median_slot=np.full(P, -1),
            opacity=np.zeros(P),
            uncertainty=np.zeros(P),
            count=np.zeros(P, dtype=np.int64),
            owner_slot=np.full(P, -1),
            owner_weight=np.zeros(P),
        )
    weights = alpha * trans
    after = trans * (1.0 - alpha)
    crossing = (after < MEDIAN_TRANSMITTANCE) & (alpha > 0)
    has_median = np.any(crossing, axis=0)
    median_slot = np.where(has_median, np.argmax(crossing, axis=0), -1)

    if observed is not None:
        residual = np.where(observed_valid[None, :], depths[:, None] - observed[None, :], 0.0)
        uncertainty = np.sum(weights * residual**2, axis=0)
    else:
        uncertainty = np.zeros(alpha.shape[1])

    owner_slot = np.argmax(weights, axis=0)
    owner_weight = np.take_along_axis(weights, owner_slot[None, :], axis=0)[0]
    return _BlendMaps(
        color=weights.T @ colors,
        alpha_depth=weights.T @ depths,
        median_depth=np.where(has_median, depths[np.maximum(median_slot, 0)], 0.0),
        median_slot=median_slot,
        opacity=np.sum(weights, axis=0),
        uncertainty=uncertainty,
        count=np.sum(alpha > 0, axis=0),
        owner_slot=np.where(owner_weight > 0, owner_slot, -1),
        owner_weight=owner_weight,
    )


@dataclass
class _FrameContext:
    """Per-frame arrays of the visible primitives in blend order."""

    ids: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    sigma: np.ndarray
    colors: np.ndarray
    depths: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


def _prepare(cloud: GaussianCloud, pose: CameraPose, intrinsics: CameraIntrinsics, settings: RasterSettings):
    cloud.check_finite()
    projection = project_gaussians(
        cloud.means, cloud.covariances, pose, intrinsics, settings.dilation, settings.cutoff_sigma
    )
    colors, unclamped = eval_colors(cloud.sh, cloud.means - pose.camera_center, cloud.sh_degree)
    depths = projection.depth

    visible_ids = np.nonzero(projection.visible)[0]
    order = visible_ids[np.argsort(depths[visible_ids], kind="stable")]
    ctx = _FrameContext(
        ids=order,
        mean2d=projection.mean2d[order],
        conic=projection.conic[order],
        sigma=sigmoid(cloud.opacity_logits[order]),
        colors=colors[order],
        depths=depths[order],
        lo=projection.mean2d[order] - projection.half_extent[order],
        hi=projection.mean2d[order] + projection.half_extent[order],
    )
    return projection, colors, unclamped, ctx


def _tiles(intrinsics: CameraIntrinsics, tile_size: int) -> List[Tuple[int, int, int, int]]:
    return [
        (y0, min(y0 + tile_size, intrinsics.height), x0, min(x0 + tile_size, intrinsics.width))
        for y0 in range(0, intrinsics.height, tile_size)
        for x0 in range(0, intrinsics.width, tile_size)
    ]


def render(
    primitives: Primitives,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    observed_depth: Optional[np.ndarray] = None,
    settings: Optional[RasterSettings] = None,
) -> Tuple[RenderOutput, BlendRecord]:
    """Render all five maps with the tiled rasterizer and keep the blend lists for the backward pass."""
    settings = settings or RasterSettings()
    cloud = as_cloud(primitives)
    observed_valid = observed_validity(observed_depth, intrinsics)
    D = None if observed_depth is None else np.where(observed_valid, observed_depth, 0.0)
    projection, colors, unclamped, ctx = _prepare(cloud, pose, intrinsics, settings)

    def blend_tile(bounds: Tuple[int, int, int, int]) -> Tuple[TileBlend, _BlendMaps]:
        y0, y1, x0, x1 = bounds
        overlap = (ctx.lo[:, 0] <= x1 - 1) & (ctx.hi[:, 0] >= x0) & (ctx.lo[:, 1] <= y1 - 1) & (ctx.hi[:, 1] >= y0)
        slots = np.nonzero(overlap)[0]
        vv, uu = np.mgrid[y0:y1, x0:x1]
        u = uu.ravel().astype(float)
        v = vv.ravel().astype(float)
        dx = u[None, :] - ctx.mean2d[slots, 0:1]
        dy = v[None, :] - ctx.mean2d[slots, 1:2]
        alpha, grad_mask = _alpha(dx, dy, ctx.conic[slots], ctx.sigma[slots], settings)
        alpha, trans = _composite(alpha, settings.termination)
        tile_D = None if D is None else D[y0:y1, x0:x1].ravel()
        maps = _reduce_blend(
            alpha, trans, ctx.colors[slots], ctx.depths[slots], tile_D, observed_valid[y0:y1, x0:x1].ravel()
        )
        blend = TileBlend(
            y0=y0,
            y1=y1,
            x0=x0,
            x1=x1,
            ids=ctx.ids[slots],
            alpha=alpha,
            transmittance=trans,
            grad_mask=grad_mask & (alpha > 0),
            median_slot=maps.median_slot,
        )
        return blend, maps

    H, W = intrinsics.height, intrinsics.width
    output = RenderOutput.blank(H, W, observed_depth is not None)
    owner_id = np.full((H, W), -1, dtype=np.int64)
    owner_weight = np.zeros((H, W))
    owner_depth = np.zeros((H, W))
    tiles: List[TileBlend] = []

    for blend, maps in parallel_map(blend_tile, _tiles(intrinsics, settings.tile_size)):
        window = (slice(blend.y0, blend.y1), slice(blend.x0, blend.x1))
        shape = (blend.y1 - blend.y0, blend.x1 - blend.x0)
        output.color[window] = maps.color.reshape(shape + (3,))
        output.alpha_depth[window] = maps.alpha_depth.reshape(shape)
        output.median_depth[window] = maps.median_depth.reshape(shape)
        output.median_valid[window] = (maps.median_slot >= 0).reshape(shape)
        output.opacity[window] = maps.opacity.reshape(shape)
        output.uncertainty[window] = maps.uncertainty.reshape(shape)
        output.per_pixel_count[window] = maps.count.reshape(shape)
        owned = maps.owner_slot >= 0
        tile_owner = np.full(len(owned), -1, dtype=np.int64)
        tile_owner[owned] = blend.ids[maps.owner_slot[owned]]
        tile_depth = np.zeros(len(owned))
        tile_depth[owned] = projection.depth[tile_owner[owned]]
        owner_id[window] = tile_owner.reshape(shape)
        owner_weight[window] = maps.owner_weight.reshape(shape)
        owner_depth[window] = tile_depth.reshape(shape)
        tiles.append(blend)

    logger.debug(f"Rendered {len(ctx.ids)} of {len(cloud)} primitives over {len(tiles)} tiles")
    record = BlendRecord(
        num_primitives=len(cloud),
        image_shape=(H, W),
        tiles=tiles,
        owner_id=owner_id,
        owner_weight=owner_weight,
        owner_depth=owner_depth,
        visible=projection.visible,
        depths=projection.depth,
        colors=colors,
        color_unclamped=unclamped,
        projection=projection,
        observed_depth=D,
        observed_valid=observed_valid,
        pose=pose,
        settings=settings,
    )
    return output, record


def render_reference(
    primitives: Primitives,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    observed_depth: Optional[np.ndarray] = None,
    settings: Optional[RasterSettings] = None,
) -> RenderOutput:
    """Brute-force renderer: every visible primitive against every pixel, one image row at a time.

    No tiles and no early termination; `settings.termination` is ignored, so this differs from
    `render` by at most the transmittance left at the termination point times the blended value.
    """
    settings = settings or RasterSettings()
    cloud = as_cloud(primitives)
    observed_valid = observed_validity(observed_depth, intrinsics)
    D = None if observed_depth is None else np.where(observed_valid, observed_depth, 0.0)
    _, _, _, ctx = _prepare(cloud, pose, intrinsics, settings)

    H, W = intrinsics.height, intrinsics.width
    output = RenderOutput.blank(H, W, observed_depth is not None)
    u = np.arange(W, dtype=float)
    for row in range(H):
        dx = u[None, :] - ctx.mean2d[:, 0:1]
        dy = np.full((1, W), float(row)) - ctx.mean2d[:, 1:2]
        alpha, _ = _alpha(dx, dy, ctx.conic, ctx.sigma, settings)
        trans = _exclusive_transmittance(alpha)
        maps = _reduce_blend(
            alpha, trans, ctx.colors, ctx.depths, None if D is None else D[row], observed_valid[row]
        )
        output.color[row] = maps.color
        output.alpha_depth[row] = maps.alpha_depth
        output.median_depth[row] = maps.median_depth
        output.median_valid[row] = maps.median_slot >= 0
        output.opacity[row] = maps.opacity
        output.uncertainty[row] = maps.uncertainty
        output.per_pixel_count[row] = maps.count
    return output


def render_replay(
    primitives: Primitives, pose: CameraPose, intrinsics: CameraIntrinsics, record: BlendRecord
) -> RenderOutput:
    """Re-render on the blend structure of an earlier pass.

    Blend lists and their order, skipped and clamped samples, the termination cut and the median
    slots are taken from `record`; footprints, alphas, colours and depths are recomputed. Where the
    same discrete decisions would be taken anyway this equals `render`.
    """
    cloud = as_cloud(primitives)
    if record.num_primitives != len(cloud):
        raise InvalidArgumentError(
            f"Blend record covers {record.num_primitives} primitives but {len(cloud)} were given"
        )
    settings = record.settings
    projection = project_gaussians(
        cloud.means, cloud.covariances, pose, intrinsics, settings.dilation, settings.cutoff_sigma
    )
    colors, _ = eval_colors(cloud.sh, cloud.means - pose.camera_center, cloud.sh_degree)
    sigma = sigmoid(cloud.opacity_logits)
    D = record.observed_depth

    H, W = record.image_shape
    output = RenderOutput.blank(H, W, D is not None)
    for tile in record.tiles:
        window = (slice(tile.y0, tile.y1), slice(tile.x0, tile.x1))
        shape = (tile.y1 - tile.y0, tile.x1 - tile.x0)
        blended = tile.alpha > 0
        output.per_pixel_count[window] = blended.sum(axis=0).reshape(shape)
        output.median_valid[window] = (tile.median_slot >= 0).reshape(shape)
        if len(tile.ids) == 0:
            continue

        ids = tile.ids
        vv, uu = np.mgrid[tile.y0 : tile.y1, tile.x0 : tile.x1]
        dx = uu.ravel()[None, :].astype(float) - projection.mean2d[ids, 0:1]
        dy = vv.ravel()[None, :].astype(float) - projection.mean2d[ids, 1:2]
        A, B, C = projection.conic[ids, 0:1], projection.conic[ids, 1:2], projection.conic[ids, 2:3]
        raw = sigma[ids, None] * np.exp(-0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy)
        # blended samples outside the gradient mask were clamped
        alpha = np.where(tile.grad_mask, raw, np.where(blended, settings.max_alpha, 0.0))
        weights = alpha * _exclusive_transmittance(alpha)
        depths = projection.depth[ids]

        output.color[window] = (weights.T @ colors[ids]).reshape(shape + (3,))
        output.alpha_depth[window] = (weights.T @ depths).reshape(shape)
        output.opacity[window] = weights.sum(axis=0).reshape(shape)
        slot = tile.median_slot
        output.median_depth[window] = np.where(slot >= 0, depths[np.maximum(slot, 0)], 0.0).reshape(shape)
        if D is not None:
            valid = record.observed_valid[window].ravel()
            residual = np.where(valid[None, :], depths[:, None] - D[window].ravel()[None, :], 0.0)
            output.uncertainty[window] = np.sum(weights * residual**2, axis=0).reshape(shape)
    return output


@dataclass
class _TileGradients:
    ids: np.ndarray
    color: np.ndarray
    depth: np.ndarray
    sigma: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray


def _map_window(grad: Optional[np.ndarray], tile: TileBlend, channels: int = 0) -> np.ndarray:
    P = (tile.y1 - tile.y0) * (tile.x1 - tile.x0)
    shape = (P, channels) if channels else (P,)
    if grad is None:
        return np.zeros(shape)
    return grad[tile.y0 : tile.y1, tile.x0 : tile.x1].reshape(shape)


def render_backward(
    primitives: Primitives,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    record: BlendRecord,
    upstream: ImageGradients,
    detach_variance_weights: bool = False,
) -> GradientBundle:
    """Exact gradients of the loss implied by `upstream` for every primitive parameter and the pose.

    The pose gradient is with respect to a perturbation applied in the camera frame,
    p_cam' = exp(d_rot) p_cam + d_trans. With `detach_variance_weights` the uncertainty
    map's blending weights are constants and it only pulls on primitive depths.
    """
    cloud = as_cloud(primitives)
    if record.num_primitives != len(cloud):
        raise InvalidArgumentError(
            f"Blend record covers {record.num_primitives} primitives but {len(cloud)} were given"
        )
    H, W = record.image_shape
    if (H, W) != (intrinsics.height, intrinsics.width):
        raise InvalidArgumentError(f"Blend record is {W}x{H}, intrinsics are {intrinsics.width}x{intrinsics.height}")

    N = len(cloud)
    bundle = GradientBundle.zeros(N, cloud.sh.shape[1])
    projection = record.projection
    D = record.observed_depth
    grad_u = None
    if upstream.uncertainty is not None and D is not None:
        grad_u = np.where(record.observed_valid, upstream.uncertainty, 0.0)
    sigma_all = sigmoid(cloud.opacity_logits)

    def tile_backward(tile: TileBlend) -> Optional[_TileGradients]:
        if len(tile.ids) == 0:
            return None
        ids = tile.ids
        gC = _map_window(upstream.color, tile, 3)
        gDa = _map_window(upstream.alpha_depth, tile)
        gDm = _map_window(upstream.median_depth, tile)
        gO = _map_window(upstream.opacity, tile)
        gU = _map_window(grad_u, tile)
        Dt = _map_window(D, tile)

        c = record.colors[ids]
        d = record.depths[ids]
        alpha, trans = tile.alpha, tile.transmittance
        w = alpha * trans
        residual = d[:, None] - Dt[None, :]

        # per-primitive value each blend weight multiplies
        value = c @ gC.T + d[:, None] * gDa[None, :] + gO[None, :]
        if not detach_variance_weights:
            value = value + gU[None, :] * residual**2
        weighted = w * value
        behind = np.flip(np.cumsum(np.flip(weighted, axis=0), axis=0), axis=0) - weighted
        g_alpha = np.where(tile.grad_mask, trans * value - behind / (1.0 - alpha), 0.0)

        g_depth = w @ gDa + (2.0 * w * residual) @ gU
        has_median = tile.median_slot >= 0
        g_depth += np.bincount(tile.median_slot[has_median], weights=gDm[has_median], minlength=len(ids))

        vv, uu = np.mgrid[tile.y0 : tile.y1, tile.x0 : tile.x1]
        mean2d = projection.mean2d[ids]
        conic = projection.conic[ids]
        dx = uu.ravel()[None, :].astype(float) - mean2d[:, 0:1]
        dy = vv.ravel()[None, :].astype(float) - mean2d[:, 1:2]
        A, B, C = conic[:, 0:1], conic[:, 1:2], conic[:, 2:3]
        density = np.exp(-0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy)
        g_power = g_alpha * alpha

        return _TileGradients(
            ids=ids,
            color=w @ gC,
            depth=g_depth,
            sigma=np.sum(g_alpha * density, axis=1),
            mean2d=np.stack(
                [np.sum(g_power * (A * dx + B * dy), axis=1), np.sum(g_power * (B * dx + C * dy), axis=1)], axis=-1
            ),
            conic=np.stack(
                [
                    np.sum(g_power * (-0.5 * dx * dx), axis=1),
                    np.sum(g_power * (-dx * dy), axis=1),
                    np.sum(g_power * (-0.5 * dy * dy), axis=1),
                ],
                axis=-1,
            ),
        )

    g_color = np.zeros((N, 3))
    g_depth = np.zeros(N)
    g_sigma = np.zeros(N)
    g_mean2d = np.zeros((N, 2))
    g_conic = np.zeros((N, 3))
    # ids are unique within a tile; tiles are reduced in their fixed order
    for part in parallel_map(tile_backward, record.tiles):
        if part is None:
            continue
        g_color[part.ids] += part.color
        g_depth[part.ids] += part.depth
        g_sigma[part.ids] += part.sigma
        g_mean2d[part.ids] += part.mean2d
        g_conic[part.ids] += part.conic

    bundle.d_opacity = g_sigma * sigma_all * (1.0 - sigma_all)
    bundle.d_mean2d = g_mean2d

    R = record.pose.rotation
    idx = np.nonzero(record.visible)[0]
    if len(idx):
        _chain_geometry(cloud, intrinsics, projection, R, idx, g_mean2d, g_conic, g_depth, bundle)

    d_sh, g_view = eval_colors_backward(
        cloud.sh, cloud.means - record.pose.camera_center, cloud.sh_degree, record.color_unclamped, g_color
    )
    bundle.d_sh = d_sh
    bundle.d_mean += g_view
    # camera centre moves by -R^T d_trans under a camera-frame perturbation
    bundle.d_pose[3:] += R @ g_view.sum(axis=0)
    return bundle


def _chain_geometry(
    cloud: GaussianCloud,
    intrinsics: CameraIntrinsics,
    projection: ProjectedGaussians,
    R: np.ndarray,
    idx: np.ndarray,
    g_mean2d: np.ndarray,
    g_conic: np.ndarray,
    g_depth: np.ndarray,
    bundle: GradientBundle,
) -> None:
    """Push screen-space gradients back through EWA projection to means, scales, rotations and the pose."""
    fx, fy = intrinsics.fx, intrinsics.fy
    p_cam = projection.p_cam[idx]
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    J = projection.jacobian[idx]
    cov_cam = projection.cov_cam[idx]

    gA, gB, gC = g_conic[idx, 0], g_conic[idx, 1], g_conic[idx, 2]
    A, B, C = projection.conic[idx, 0], projection.conic[idx, 1], projection.conic[idx, 2]
    Q = np.stack([np.stack([A, B], -1), np.stack([B, C], -1)], -2)
    G_conic = np.stack([np.stack([gA, 0.5 * gB], -1), np.stack([0.5 * gB, gC], -1)], -2)
    G_cov2d = -Q @ G_conic @ Q

    G_cov_cam = np.swapaxes(J, -1, -2) @ G_cov2d @ J
    G_J = 2.0 * G_cov2d @ J @ cov_cam

    gu, gv = g_mean2d[idx, 0], g_mean2d[idx, 1]
    z2, z3 = z * z, z * z * z
    g_pc = np.empty((len(idx), 3))
    g_pc[:, 0] = gu * fx / z - G_J[:, 0, 2] * fx / z2
    g_pc[:, 1] = gv * fy / z - G_J[:, 1, 2] * fy / z2
    g_pc[:, 2] = (
        -gu * fx * x / z2
        - gv * fy * y / z2
        - G_J[:, 0, 0] * fx / z2
        + G_J[:, 0, 2] * 2.0 * fx * x / z3
        - G_J[:, 1, 1] * fy / z2
        + G_J[:, 1, 2] * 2.0 * fy * y / z3
        + g_depth[idx]
    )

    bundle.d_pose[:3] += np.sum(np.cross(p_cam, g_pc), axis=0)
    bundle.d_pose[:3] += 2.0 * np.einsum("nab,kac,ncb->k", G_cov_cam, HAT_BASIS, cov_cam)
    bundle.d_pose[3:] += g_pc.sum(axis=0)
    bundle.d_mean[idx] += g_pc @ R

    G_cov = R.T @ G_cov_cam @ R
    quats = cloud.quats[idx]
    norm = np.linalg.norm(quats, axis=-1, keepdims=True)
    q = quats / norm
    Rq = quat_to_rotmat(q)
    s = cloud.scales[idx]
    M = Rq * s[:, None, :]
    G_M = 2.0 * G_cov @ M
    bundle.d_scale[idx] = np.sum(G_M * Rq, axis=1) * s

    G = G_M * s[:, None, :]
    w, qx, qy, qz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g_unit = 2.0 * np.stack(
        [
            -qz * G[:, 0, 1] + qy * G[:, 0, 2] + qz * G[:, 1, 0] - qx * G[:, 1, 2] - qy * G[:, 2, 0] + qx * G[:, 2, 1],
            qy * G[:, 0, 1] + qz * G[:, 0, 2] + qy * G[:, 1, 0] - 2 * qx * G[:, 1, 1] - w * G[:, 1, 2]
            + qz * G[:, 2, 0] + w * G[:, 2, 1] - 2 * qx * G[:, 2, 2],
            -2 * qy * G[:, 0, 0] + qx * G[:, 0, 1] + w * G[:, 0, 2] + qx * G[:, 1, 0] + qz * G[:, 1, 2]
            - w * G[:, 2, 0] + qz * G[:, 2, 1] - 2 * qy * G[:, 2, 2],
            -2 * qz * G[:, 0, 0] - w * G[:, 0, 1] + qx * G[:, 0, 2] + w * G[:, 1, 0] - 2 * qz * G[:, 1, 1]
            + qy * G[:, 1, 2] + qx * G[:, 2, 0] + qy * G[:, 2, 1],
        ],
        axis=-1,
    )
    # through q / |q|
    bundle.d_rotation[idx] = (g_unit - q * np.sum(q * g_unit, axis=-1, keepdims=True)) / norm
