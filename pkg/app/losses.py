"""Photometric, geometric and regularization objectives with their gradients on the rendered maps."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from app.models import LossWeights
from app.rasterizer import ImageGradients, RenderOutput

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossTerm:
    """One scalar objective, its gradient on the rendered maps, and whether its mask was empty."""

    name: str
    value: float
    grad: ImageGradients = field(default_factory=ImageGradients)
    d_log_scales: Optional[np.ndarray] = None
    empty: bool = False


@dataclass
class LossResult:
    total: float
    terms: Dict[str, float]
    grad: ImageGradients
    d_log_scales: Optional[np.ndarray] = None
    empty_terms: List[str] = field(default_factory=list)

    @property
    def is_finite(self) -> bool:
        return bool(np.isfinite(self.total))


def _normalizer(mask: np.ndarray, normalize_by_valid: bool) -> float:
    return float(np.count_nonzero(mask)) if normalize_by_valid else float(mask.size)


def _empty(name: str) -> LossTerm:
    logger.debug(f"{name} loss has an empty mask; defined as 0")
    return LossTerm(name=name, value=0.0, grad=ImageGradients(), empty=True)


def color_loss(
    rendered: np.ndarray, target: np.ndarray, mask: Optional[np.ndarray] = None, normalize_by_valid: bool = True
) -> LossTerm:
    """Mean absolute error over the unmasked pixels and all channels."""
    rendered = np.asarray(rendered, dtype=float)
    diff = rendered - np.asarray(target, dtype=float)
    pixel_shape = diff.shape[:2]
    channels = diff.shape[2] if diff.ndim == 3 else 1
    mask = np.ones(pixel_shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        return _empty("color")

    weight = mask[..., None] if diff.ndim == 3 else mask
    denom = channels * _normalizer(mask, normalize_by_valid)
    value = float(np.sum(np.abs(diff) * weight) / denom)
    return LossTerm(name="color", value=value, grad=ImageGradients(color=np.sign(diff) * weight / denom))


def _ssim_terms(x: np.ndarray, y: np.ndarray, blur):
    mu_x, mu_y = blur(x), blur(y)
    e_xx, e_yy, e_xy = blur(x * x), blur(y * y), blur(x * y)
    var_x = e_xx - mu_x**2
    var_y = e_yy - mu_y**2
    cov_xy = e_xy - mu_x * mu_y
    A1 = 2 * mu_x * mu_y + SSIM_C1
    A2 = 2 * cov_xy + SSIM_C2
    B1 = mu_x**2 + mu_y**2 + SSIM_C1
    B2 = var_x + var_y + SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    d_mu = 2 * mu_y * (A2 - A1) / (B1 * B2) - 2 * mu_x * S * (1 / B1 - 1 / B2)
    d_exx = -S / B2
    d_exy = 2 * A1 / (B1 * B2)
    return S, d_mu, d_exx, d_exy


def ssim_loss(rendered: np.ndarray, target: np.ndarray) -> LossTerm:
    """1 - mean SSIM with an 11x11 Gaussian window (sigma 1.5) per channel.

    Images smaller than the window use SSIM of the global per-channel statistics.
    """
    x = np.asarray(rendered, dtype=float)
    y = np.asarray(target, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x, y = x[..., None], y[..., None]
    H, W, C = x.shape

    if H < SSIM_WINDOW or W < SSIM_WINDOW:

        def blur(img):
            return np.broadcast_to(img.mean(axis=(0, 1), keepdims=True), img.shape)

    else:
        truncate = (SSIM_WINDOW // 2) / SSIM_SIGMA

        def blur(img):
            return gaussian_filter(img, sigma=(SSIM_SIGMA, SSIM_SIGMA, 0), truncate=truncate, mode="constant")

    S, d_mu, d_exx, d_exy = _ssim_terms(x, y, blur)
    # both windows are symmetric linear filters, so each is its own adjoint
    grad = -(blur(d_mu) + 2 * x * blur(d_exx) + y * blur(d_exy)) / S.size
    if squeeze:
        grad = grad[..., 0]
    return LossTerm(name="ssim", value=1.0 - float(S.mean()), grad=ImageGradients(color=grad))


def geo_loss(
    alpha_depth: np.ndarray, observed_depth: np.ndarray, valid_mask: np.ndarray, normalize_by_valid: bool = True
) -> LossTerm:
    """Mean absolute error between rendered alpha depth and sensor depth over valid pixels."""
    mask = np.asarray(valid_mask, dtype=bool)
    if not mask.any():
        return _empty("geo")
    diff = np.where(mask, alpha_depth - np.where(mask, observed_depth, 0.0), 0.0)
    denom = _normalizer(mask, normalize_by_valid)
    return LossTerm(
        name="geo", value=float(np.sum(np.abs(diff)) / denom), grad=ImageGradients(alpha_depth=np.sign(diff) / denom)
    )


def align_loss(
    alpha_depth: np.ndarray, median_depth: np.ndarray, valid_mask: np.ndarray, normalize_by_valid: bool = True
) -> LossTerm:
    """Mean absolute difference between alpha-blended and median depth."""
    mask = np.asarray(valid_mask, dtype=bool)
    if not mask.any():
        return _empty("align")
    diff = np.where(mask, alpha_depth - median_depth, 0.0)
    denom = _normalizer(mask, normalize_by_valid)
    sign = np.sign(diff) / denom
    return LossTerm(
        name="align",
        value=float(np.sum(np.abs(diff)) / denom),
        grad=ImageGradients(alpha_depth=sign, median_depth=-sign),
    )


def iso_loss(log_scales: np.ndarray, visible: np.ndarray, epsilon: float = 1.0) -> LossTerm:
    """Mean over visible primitives of max(max(s)/min(s), epsilon) - epsilon."""
    visible = np.asarray(visible, dtype=bool)
    d_log_scales = np.zeros_like(log_scales)
    count = int(np.count_nonzero(visible))
    if count == 0:
        term = _empty("iso")
        term.d_log_scales = d_log_scales
        return term

    ls = log_scales[visible]
    hi = np.argmax(ls, axis=1)
    lo = np.argmin(ls, axis=1)
    ratio = np.exp(ls.max(axis=1) - ls.min(axis=1))
    active = ratio > epsilon
    value = float(np.sum(np.where(active, ratio - epsilon, 0.0)) / count)

    grad = np.zeros_like(ls)
    rows = np.nonzero(active)[0]
    # d ratio / d log s_max = ratio, d ratio / d log s_min = -ratio
    grad[rows, hi[rows]] += ratio[rows] / count
    grad[rows, lo[rows]] -= ratio[rows] / count
    d_log_scales[visible] = grad
    return LossTerm(name="iso", value=value, d_log_scales=d_log_scales)


def var_loss(
    uncertainty: np.ndarray, valid_mask: np.ndarray, present: bool = True, normalize_by_valid: bool = True
) -> LossTerm:
    """Mean |U| over valid pixels. U is non-negative, so the absolute value only fixes the subgradient at 0."""
    mask = np.asarray(valid_mask, dtype=bool)
    if not present or not mask.any():
        return _empty("var")
    values = np.where(mask, uncertainty, 0.0)
    denom = _normalizer(mask, normalize_by_valid)
    return LossTerm(
        name="var",
        value=float(np.sum(np.abs(values)) / denom),
        grad=ImageGradients(uncertainty=np.sign(values) / denom),
    )


def depth_masks(output: RenderOutput, observed_valid: np.ndarray, opacity_floor: float) -> Dict[str, np.ndarray]:
    """Pixel masks of the depth terms: sensor-valid and sufficiently opaque, plus a valid median for align."""
    opaque = (output.opacity >= opacity_floor) & output.depth_valid
    return {
        "geo": opaque & observed_valid,
        "align": opaque & output.median_valid,
        "var": opaque & observed_valid,
    }


def _combine(terms: List[LossTerm], weights: Dict[str, float]) -> LossResult:
    grad = ImageGradients()
    d_log_scales = None
    values: Dict[str, float] = {}
    total = 0.0
    for term in terms:
        w = weights[term.name]
        values[term.name] = term.value
        total += w * term.value
        if w == 0.0:
            continue
        grad = grad + term.grad.scaled(w)
        if term.d_log_scales is not None:
            d_log_scales = w * term.d_log_scales if d_log_scales is None else d_log_scales + w * term.d_log_scales
    return LossResult(
        total=total,
        terms=values,
        grad=grad,
        d_log_scales=d_log_scales,
        empty_terms=[term.name for term in terms if term.empty],
    )


def mapping_loss(
    output: RenderOutput,
    color: np.ndarray,
    depth: np.ndarray,
    observed_valid: np.ndarray,
    log_scales: np.ndarray,
    visible: np.ndarray,
    weights: LossWeights,
) -> LossResult:
    """Weighted sum of the colour, SSIM, geometric, alignment, isotropy and variance terms."""
    masks = depth_masks(output, observed_valid, weights.opacity_floor)
    normalize = weights.normalize_by_valid_pixels
    terms = [
        color_loss(output.color, color, normalize_by_valid=normalize),
        ssim_loss(output.color, color),
        geo_loss(output.alpha_depth, depth, masks["geo"], normalize),
        align_loss(output.alpha_depth, output.median_depth, masks["align"], normalize),
        iso_loss(log_scales, visible, weights.iso_epsilon),
        var_loss(output.uncertainty, masks["var"], output.uncertainty_present, normalize),
    ]
    return _combine(
        terms,
        {
            "color": weights.color,
            "ssim": weights.ssim,
            "geo": weights.geo,
            "align": weights.align,
            "iso": weights.iso,
            "var": weights.var,
        },
    )


def tracking_loss(
    output: RenderOutput,
    color: np.ndarray,
    depth: np.ndarray,
    observed_valid: np.ndarray,
    weights: LossWeights,
) -> LossResult:
    """Weighted colour and geometric terms used to optimize the camera pose.

    Both terms skip pixels the map does not cover (opacity below the floor).
    """
    masks = depth_masks(output, observed_valid, weights.opacity_floor)
    normalize = weights.normalize_by_valid_pixels
    terms = [
        color_loss(output.color, color, output.opacity >= weights.opacity_floor, normalize),
        geo_loss(output.alpha_depth, depth, masks["geo"], normalize),
    ]
    return _combine(terms, {"color": weights.track_color, "geo": weights.track_geo})
