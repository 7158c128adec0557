"""Per-primitive depth uncertainty from dominated pixels, and opacity reduction of unreliable primitives."""

import logging
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from app.errors import InvalidArgumentError
from app.gaussians import GaussianCloud, logit
from app.models import UncertaintyConfig
from app.rasterizer import BlendRecord
from app.workers import parallel_map

logger = logging.getLogger(__name__)


@dataclass
class UncertaintyUpdate:
    """Result of one accumulation cycle over a keyframe window."""

    observed: np.ndarray
    weighted_error: np.ndarray
    pixel_count: np.ndarray

    @property
    def num_observed(self) -> int:
        return int(np.count_nonzero(self.observed))


def _dominated_sums(record: BlendRecord, count: int):
    owner = record.owner_id
    if record.observed_depth is None:
        return np.zeros(count), np.zeros(count), np.zeros(count, dtype=np.int64)
    pixels = (owner >= 0) & record.observed_valid
    ids = owner[pixels]
    weights = record.owner_weight[pixels]
    sq_error = (record.observed_depth[pixels] - record.owner_depth[pixels]) ** 2
    return (
        np.bincount(ids, weights=weights * sq_error, minlength=count),
        np.bincount(ids, weights=weights, minlength=count),
        np.bincount(ids, minlength=count).astype(np.int64),
    )


def accumulate_uncertainty(cloud: GaussianCloud, records: Mapping[int, BlendRecord]) -> UncertaintyUpdate:
    """Weighted mean squared depth error of every primitive over its dominated pixels in the window.

    `records` maps keyframe ids to forward-pass records rendered against sensor depth. The mean
    divides by the total number of dominated pixels. Primitives with no dominated pixel keep
    their previous value and are reported as unobserved.
    """
    count = len(cloud)
    if not records:
        return UncertaintyUpdate(
            observed=np.zeros(count, dtype=bool),
            weighted_error=np.zeros(count),
            pixel_count=np.zeros(count, dtype=np.int64),
        )
    for frame_id, record in records.items():
        if record.num_primitives != count:
            raise InvalidArgumentError(
                f"Record of keyframe {frame_id} covers {record.num_primitives} primitives, map has {count}"
            )

    # reduce in keyframe-id order so the result does not depend on window order
    ordered = [records[frame_id] for frame_id in sorted(records)]
    error_sum = np.zeros(count)
    weight_sum = np.zeros(count)
    pixel_count = np.zeros(count, dtype=np.int64)
    for err, weight, pixels in parallel_map(lambda record: _dominated_sums(record, count), ordered):
        error_sum += err
        weight_sum += weight
        pixel_count += pixels

    observed = pixel_count > 0
    cloud.uncertainty[observed] = error_sum[observed] / pixel_count[observed]
    cloud.dominated_weight[observed] = weight_sum[observed]
    cloud.dominated_sq_error[observed] = error_sum[observed]
    cloud.dominated_count[observed] = pixel_count[observed]
    return UncertaintyUpdate(observed=observed, weighted_error=error_sum, pixel_count=pixel_count)


def prune_unreliable(cloud: GaussianCloud, config: UncertaintyConfig, observed: Optional[np.ndarray] = None) -> int:
    """Set the opacity of every primitive with uncertainty above tau to the reduced level.

    The primitives stay in the map and their opacity remains optimizable. When `observed` is
    given, only primitives observed in the current cycle are considered.
    """
    unreliable = cloud.uncertainty > config.tau
    if observed is not None:
        unreliable &= observed
    cloud.opacity_logits[unreliable] = logit(config.reduced_opacity)
    return int(np.count_nonzero(unreliable))


def log_statistics(cloud: GaussianCloud, update: UncertaintyUpdate, reduced: int) -> None:
    if update.num_observed == 0:
        logger.info(f"Uncertainty: no observed primitives, reduced {reduced}")
        return
    nu = cloud.uncertainty[update.observed]
    q = np.percentile(nu, [0, 50, 90, 100])
    logger.info(
        f"Uncertainty: observed {update.num_observed}/{len(cloud)}, reduced {reduced}, "
        f"nu min={q[0]:.3g} median={q[1]:.3g} p90={q[2]:.3g} max={q[3]:.3g}"
    )


def run_cycle(cloud: GaussianCloud, records: Mapping[int, BlendRecord], config: UncertaintyConfig) -> int:
    """Accumulate over the window, reduce unreliable primitives and log the cycle."""
    if not config.enabled or not records:
        return 0
    update = accumulate_uncertainty(cloud, records)
    reduced = prune_unreliable(cloud, config, update.observed)
    log_statistics(cloud, update, reduced)
    return reduced
