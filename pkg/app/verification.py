"""Self-checks run by `verify`: finite-difference gradients, oracle equivalence and render/metric properties."""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from app.errors import InvalidArgumentError
from app.evaluation import brute_force_distances, nearest_distances, translation_errors
from app.gaussians import PARAMETER_NAMES, GaussianCloud
from app.geometry import CameraPose, backproject_pixels, exp_map
from app.losses import LossResult, mapping_loss, tracking_loss
from app.models import CameraIntrinsics, LossWeights, RasterSettings
from app.rasterizer import (
    BlendRecord,
    GradientBundle,
    RenderOutput,
    render,
    render_backward,
    render_reference,
    render_replay,
)

logger = logging.getLogger(__name__)

GRADIENT_INTRINSICS = CameraIntrinsics(fx=32.0, fy=32.0, cx=15.5, cy=15.5, width=32, height=32)
GRADIENT_PRIMITIVES = 50
ORACLE_INTRINSICS = CameraIntrinsics()
ORACLE_PRIMITIVES = 200
# dense enough that many pixels reach the default termination threshold
TRUNCATION_PRIMITIVES = 4000
ORACLE_TOLERANCE = 1e-5
REPLAY_TOLERANCE = 1e-12
RELATIVE_TOLERANCE = 1e-3
ABSOLUTE_TOLERANCE = 1e-7
FD_STEP = 1e-4
DEFAULT_SEEDS = 20
LOSS_TERMS = ("color", "ssim", "geo", "align", "iso", "var", "mapping", "tracking")
_SINGLE_TERMS = ("color", "ssim", "geo", "align", "iso", "var")

Backward = Callable[..., GradientBundle]
Perturbation = Callable[[float], Tuple[GaussianCloud, CameraPose]]


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


@dataclass
class Agreement:
    """Outcome of comparing analytic and numeric derivatives.

    `held` counts the samples whose steps crossed a blend boundary and were differenced on the
    blend structure of the unperturbed pass instead.
    """

    passed: bool
    worst: float
    held: int = 0

    @property
    def detail(self) -> str:
        held = f", {self.held} on the held blend structure" if self.held else ""
        return f"max rel err {self.worst:.2e}{held}"


def random_pose(rng: np.random.Generator, rotation: float = 0.05, translation: float = 0.05) -> CameraPose:
    return CameraPose(rng.uniform(-rotation, rotation, 3), rng.uniform(-translation, translation, 3))


def random_scene(
    rng: np.random.Generator,
    count: int,
    intrinsics: CameraIntrinsics,
    pose: Optional[CameraPose] = None,
    sh_degree: int = 1,
    depth_range: Tuple[float, float] = (2.0, 4.0),
    scale_range: Tuple[float, float] = (0.15, 0.5),
    opacity_range: Tuple[float, float] = (0.3, 0.8),
) -> GaussianCloud:
    """Random anisotropic primitives whose means project inside the image of `pose`."""
    pose = pose or CameraPose.identity()
    pixels = np.stack(
        [rng.uniform(0, intrinsics.width - 1, count), rng.uniform(0, intrinsics.height - 1, count)], axis=-1
    )
    depths = rng.uniform(*depth_range, count)
    cloud = GaussianCloud.from_points(
        backproject_pixels(pixels, depths, pose, intrinsics),
        rng.uniform(0.2, 0.8, (count, 3)),
        np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), (count, 3))),
        opacity=rng.uniform(*opacity_range, count),
        quats=rng.normal(size=(count, 4)),
        sh_degree=sh_degree,
    )
    if sh_degree > 0:
        cloud.sh[:, 1:, :] = rng.normal(0.0, 0.05, cloud.sh[:, 1:, :].shape)
    return cloud


@dataclass
class GradientProblem:
    """A scene, a camera and the observation the objectives compare against, rendered with production settings."""

    cloud: GaussianCloud
    pose: CameraPose
    color: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics = field(default_factory=lambda: GRADIENT_INTRINSICS)
    settings: RasterSettings = field(default_factory=RasterSettings)

    @classmethod
    def random(cls, seed: int, count: int = GRADIENT_PRIMITIVES, sh_degree: int = 1) -> "GradientProblem":
        rng = np.random.default_rng(seed)
        pose = random_pose(rng)
        intr = GRADIENT_INTRINSICS
        # opacities up to 0.995 put some footprint centres on the alpha clamp
        cloud = random_scene(rng, count, intr, pose, sh_degree, scale_range=(0.08, 0.3), opacity_range=(0.3, 0.995))
        return cls(
            cloud=cloud,
            pose=pose,
            color=rng.uniform(0.0, 1.0, (intr.height, intr.width, 3)),
            depth=rng.uniform(2.0, 4.0, (intr.height, intr.width)),
        )


def term_weights(term: str) -> LossWeights:
    """Weights isolating one objective term; 'mapping' and 'tracking' are the full weighted objectives."""
    if term in ("mapping", "tracking"):
        return LossWeights(opacity_floor=0.0)
    if term not in _SINGLE_TERMS:
        raise InvalidArgumentError(f"Unknown loss term '{term}', expected one of {LOSS_TERMS}")
    weights = {name: 0.0 for name in _SINGLE_TERMS}
    weights[term] = 1.0
    return LossWeights(opacity_floor=0.0, **weights)


def _loss(
    problem: GradientProblem, term: str, output: RenderOutput, record: BlendRecord, cloud: GaussianCloud
) -> LossResult:
    weights = term_weights(term)
    if term == "tracking":
        return tracking_loss(output, problem.color, problem.depth, record.observed_valid, weights)
    return mapping_loss(
        output, problem.color, problem.depth, record.observed_valid, cloud.log_scales, record.visible, weights
    )


def forward(
    problem: GradientProblem,
    term: str,
    cloud: Optional[GaussianCloud] = None,
    pose: Optional[CameraPose] = None,
) -> Tuple[LossResult, BlendRecord]:
    """One objective through the production renderer."""
    cloud = problem.cloud if cloud is None else cloud
    pose = problem.pose if pose is None else pose
    output, record = render(cloud, pose, problem.intrinsics, problem.depth, problem.settings)
    return _loss(problem, term, output, record, cloud), record


def analytic_gradients(
    problem: GradientProblem, term: str, backward: Backward = render_backward
) -> Tuple[GradientBundle, BlendRecord]:
    loss, record = forward(problem, term)
    bundle = backward(problem.cloud, problem.pose, problem.intrinsics, record, loss.grad)
    if loss.d_log_scales is not None:
        bundle.d_scale = bundle.d_scale + loss.d_log_scales
    return bundle, record


def same_blend(a: BlendRecord, b: BlendRecord) -> bool:
    """Whether two passes made the same discrete blend decisions, so both lie on one smooth piece."""
    if not np.array_equal(a.visible, b.visible):
        return False
    return all(
        np.array_equal(s.ids, t.ids)
        and np.array_equal(s.alpha > 0, t.alpha > 0)
        and np.array_equal(s.grad_mask, t.grad_mask)
        and np.array_equal(s.median_slot, t.median_slot)
        for s, t in zip(a.tiles, b.tiles)
    )


def production_difference(
    problem: GradientProblem, term: str, base: BlendRecord, perturb: Perturbation
) -> Optional[float]:
    """Central difference through `render`, or None when either step lands on another blend structure."""
    values = []
    for step in (FD_STEP, -FD_STEP):
        loss, record = forward(problem, term, *perturb(step))
        if not same_blend(base, record):
            return None
        values.append(loss.total)
    return (values[0] - values[1]) / (2 * FD_STEP)


def held_difference(problem: GradientProblem, term: str, base: BlendRecord, perturb: Perturbation) -> float:
    """Central difference of the smooth piece the unperturbed pass lies on."""
    values = []
    for step in (FD_STEP, -FD_STEP):
        cloud, pose = perturb(step)
        output = render_replay(cloud, pose, problem.intrinsics, base)
        values.append(_loss(problem, term, output, base, cloud).total)
    return (values[0] - values[1]) / (2 * FD_STEP)


def _parameter_step(problem: GradientProblem, name: str, index: Tuple[int, ...]) -> Perturbation:
    def perturb(step: float) -> Tuple[GaussianCloud, CameraPose]:
        cloud = problem.cloud.copy()
        getattr(cloud, name)[index] += step
        return cloud, problem.pose

    return perturb


def _pose_step(problem: GradientProblem, axis: int) -> Perturbation:
    def perturb(step: float) -> Tuple[GaussianCloud, CameraPose]:
        delta = np.zeros(6)
        delta[axis] = step
        return problem.cloud, problem.pose.retract(delta)

    return perturb


def _agree(analytic: np.ndarray, numeric: np.ndarray, held: int = 0) -> Agreement:
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    with np.errstate(divide="ignore", invalid="ignore"):
        relative = np.where(diff < ABSOLUTE_TOLERANCE, 0.0, diff / scale)
    worst = float(np.max(relative)) if relative.size else 0.0
    return Agreement(worst < RELATIVE_TOLERANCE, worst, held)


def _check_parameter(
    problem: GradientProblem,
    term: str,
    name: str,
    analytic: np.ndarray,
    base: BlendRecord,
    samples: Optional[int],
    rng: np.random.Generator,
) -> Agreement:
    indices = list(np.ndindex(analytic.shape))
    wanted = len(indices) if samples is None else min(samples, len(indices))
    expected, numeric, crossing = [], [], []
    # sample entries whose steps stay on the current blend structure
    for i in rng.permutation(len(indices))[: 3 * wanted]:
        if len(expected) == wanted:
            break
        index = indices[i]
        value = production_difference(problem, term, base, _parameter_step(problem, name, index))
        if value is None:
            crossing.append(index)
            continue
        expected.append(analytic[index])
        numeric.append(value)

    held = 0
    for index in crossing[: wanted - len(expected)]:
        expected.append(analytic[index])
        numeric.append(held_difference(problem, term, base, _parameter_step(problem, name, index)))
        held += 1
    return _agree(np.array(expected), np.array(numeric), held)


def _check_pose(problem: GradientProblem, term: str, analytic: np.ndarray, base: BlendRecord) -> Agreement:
    numeric = np.zeros(6)
    held = 0
    for axis in range(6):
        perturb = _pose_step(problem, axis)
        value = production_difference(problem, term, base, perturb)
        if value is None:
            value = held_difference(problem, term, base, perturb)
            held += 1
        numeric[axis] = value
    return _agree(analytic, numeric, held)


def parameter_check(
    problem: GradientProblem,
    term: str,
    name: str,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    backward: Backward = render_backward,
) -> Agreement:
    """Compare analytic and central-difference gradients of one stored parameter array."""
    bundle, base = analytic_gradients(problem, term, backward)
    analytic = bundle.parameter_gradients()[name]
    return _check_parameter(problem, term, name, analytic, base, samples, rng or np.random.default_rng(0))


def pose_check(problem: GradientProblem, term: str, backward: Backward = render_backward) -> Agreement:
    """Compare the analytic pose gradient with central differences of the camera-frame perturbation."""
    bundle, base = analytic_gradients(problem, term, backward)
    return _check_pose(problem, term, bundle.d_pose, base)


def replay_check(problem: GradientProblem) -> Tuple[bool, float]:
    """Largest difference between `render` and a replay of its own blend structure."""
    output, record = render(problem.cloud, problem.pose, problem.intrinsics, problem.depth, problem.settings)
    replayed = render_replay(problem.cloud, problem.pose, problem.intrinsics, record)
    if not np.array_equal(output.median_valid, replayed.median_valid):
        return False, float("inf")
    worst = max(
        float(np.max(np.abs(getattr(output, name) - getattr(replayed, name))))
        for name in ("color", "alpha_depth", "median_depth", "opacity", "uncertainty")
    )
    return worst < REPLAY_TOLERANCE, worst


def gradient_suite(
    seeds: Iterable[int], terms: Iterable[str] = LOSS_TERMS, samples: int = 5, backward: Backward = render_backward
) -> List[CheckResult]:
    results = []
    terms = tuple(terms)
    for seed in seeds:
        problem = GradientProblem.random(seed)
        rng = np.random.default_rng(seed)
        ok, worst = replay_check(problem)
        results.append(CheckResult("gradients", f"seed {seed} replay matches render", ok, f"max diff {worst:.2e}"))
        for term in terms:
            bundle, base = analytic_gradients(problem, term, backward)
            analytic = bundle.parameter_gradients()
            for name in PARAMETER_NAMES:
                check = _check_parameter(problem, term, name, analytic[name], base, samples, rng)
                results.append(CheckResult("gradients", f"seed {seed} {term} d_{name}", check.passed, check.detail))
            check = _check_pose(problem, term, bundle.d_pose, base)
            results.append(CheckResult("gradients", f"seed {seed} {term} d_pose", check.passed, check.detail))
    return results


def _oracle_scene(seed: int, count: int) -> Tuple[GaussianCloud, CameraPose, np.ndarray]:
    rng = np.random.default_rng(seed)
    intr = ORACLE_INTRINSICS
    pose = random_pose(rng)
    cloud = random_scene(rng, count, intr, pose, sh_degree=1, scale_range=(0.02, 0.15))
    depth = rng.uniform(2.0, 4.0, (intr.height, intr.width))
    return cloud, pose, depth


def oracle_check(
    seed: int, count: int = ORACLE_PRIMITIVES, settings: Optional[RasterSettings] = None
) -> Tuple[bool, float]:
    """Largest difference between the tiled renderer, termination disabled, and the brute-force renderer."""
    settings = (settings or RasterSettings()).model_copy(update={"termination": 0.0})
    cloud, pose, depth = _oracle_scene(seed, count)
    tiled, _ = render(cloud, pose, ORACLE_INTRINSICS, depth, settings)
    reference = render_reference(cloud, pose, ORACLE_INTRINSICS, depth, settings)
    if not np.array_equal(tiled.median_valid, reference.median_valid):
        return False, float("inf")
    both = tiled.median_valid
    worst = max(
        float(np.max(np.abs(tiled.color - reference.color))),
        float(np.max(np.abs(tiled.alpha_depth - reference.alpha_depth))),
        float(np.max(np.abs(tiled.opacity - reference.opacity))),
        float(np.max(np.abs(tiled.uncertainty - reference.uncertainty))),
        float(np.max(np.abs(tiled.median_depth[both] - reference.median_depth[both]), initial=0.0)),
    )
    return worst < ORACLE_TOLERANCE, worst


def truncation_excess(tiled: RenderOutput, reference: RenderOutput, record: BlendRecord) -> float:
    """How far early termination moves any map past its bound: leftover transmittance times the largest value.

    Primitives cut off behind a pixel carry at most the transmittance left where blending stopped,
    so each map can change by at most that much times the largest value they could blend in.
    Zero or negative means every pixel is within its bound.
    """
    leftover = 1.0 - tiled.opacity
    visible = record.visible
    if not np.any(visible):
        return 0.0
    depths = record.depths[visible]
    largest = {
        "color": float(np.max(record.colors[visible])),
        "alpha_depth": float(np.max(depths)),
        "opacity": 1.0,
        "uncertainty": 0.0,
    }
    if record.observed_depth is not None and np.any(record.observed_valid):
        observed = record.observed_depth[record.observed_valid]
        spread = max(np.max(depths) - np.min(observed), np.max(observed) - np.min(depths))
        largest["uncertainty"] = float(spread**2)

    excess = -np.inf
    for name, value in largest.items():
        diff = np.abs(getattr(tiled, name) - getattr(reference, name))
        if diff.ndim == 3:
            diff = diff.max(axis=-1)
        excess = max(excess, float(np.max(diff - leftover * value)))
    if not np.array_equal(tiled.median_valid, reference.median_valid):
        return float("inf")
    both = tiled.median_valid
    median = float(np.max(np.abs(tiled.median_depth[both] - reference.median_depth[both]), initial=0.0))
    return max(excess, median - REPLAY_TOLERANCE)


def truncation_check(
    seed: int, count: int = TRUNCATION_PRIMITIVES, settings: Optional[RasterSettings] = None
) -> Tuple[bool, float, int]:
    """Tiled renderer with early termination against the reference: within the truncation bound everywhere.

    Also returns the number of pixels whose transmittance reached the threshold.
    """
    settings = settings or RasterSettings()
    cloud, pose, depth = _oracle_scene(seed, count)
    tiled, record = render(cloud, pose, ORACLE_INTRINSICS, depth, settings)
    reference = render_reference(cloud, pose, ORACLE_INTRINSICS, depth, settings)
    excess = truncation_excess(tiled, reference, record)
    stopped = int(np.count_nonzero(1.0 - tiled.opacity < settings.termination))
    return excess <= REPLAY_TOLERANCE, excess, stopped


def oracle_suite(seeds: Iterable[int]) -> List[CheckResult]:
    results = []
    for seed in seeds:
        ok, worst = oracle_check(seed)
        results.append(CheckResult("oracle", f"seed {seed} tiled vs reference", ok, f"max diff {worst:.2e}"))

        ok, excess, stopped = truncation_check(seed)
        detail = f"max excess {excess:.2e}, {stopped} pixels reached the threshold"
        results.append(CheckResult("oracle", f"seed {seed} termination within bound", ok, detail))

        rng = np.random.default_rng(seed)
        query, reference = rng.normal(size=(1000, 3)), rng.normal(size=(1000, 3))
        diff = float(np.max(np.abs(nearest_distances(query, reference) - brute_force_distances(query, reference))))
        name = f"seed {seed} k-d tree vs brute force"
        results.append(CheckResult("oracle", name, diff < 1e-9, f"max diff {diff:.2e}"))
    return results


def blend_properties(record: BlendRecord, opacity: np.ndarray) -> Dict[str, float]:
    """Worst violations of the median rule, opacity conservation and monotone transmittance."""
    median_violation = 0.0
    conservation = 0.0
    increase = 0.0
    for tile in record.tiles:
        if len(tile.ids) == 0:
            continue
        trans, alpha = tile.transmittance, tile.alpha
        after = trans * (1.0 - alpha)
        final = after[-1]
        window = opacity[tile.y0 : tile.y1, tile.x0 : tile.x1].ravel()
        conservation = max(conservation, float(np.max(np.abs(window + final - 1.0))))
        if len(trans) > 1:
            increase = max(increase, float(np.max(np.diff(trans, axis=0))))
        covered = np.nonzero(window > 0.5)[0]
        slots = tile.median_slot[covered]
        if np.any(slots < 0):
            median_violation = np.inf
            continue
        before_ok = trans[slots, covered] >= 0.5
        after_ok = after[slots, covered] < 0.5
        median_violation = max(median_violation, float(np.count_nonzero(~(before_ok & after_ok))))
    return {"median": median_violation, "conservation": conservation, "increase": max(increase, 0.0)}


def property_suite(seeds: Iterable[int]) -> List[CheckResult]:
    results = []
    settings = RasterSettings(termination=0.0)
    for seed in seeds:
        rng = np.random.default_rng(seed)
        intr = ORACLE_INTRINSICS
        pose = random_pose(rng)
        cloud = random_scene(rng, 200, intr, pose, sh_degree=0, scale_range=(0.05, 0.2))
        output, record = render(cloud, pose, intr, None, settings)
        worst = blend_properties(record, output.opacity)
        checks = [
            ("median rule", worst["median"] == 0, f"{worst['median']} violations"),
            ("opacity + T = 1", worst["conservation"] < 1e-6, f"{worst['conservation']:.2e}"),
            ("monotone transmittance", worst["increase"] <= 0.0, f"{worst['increase']:.2e}"),
        ]
        results += [CheckResult("properties", f"seed {seed} {name}", ok, detail) for name, ok, detail in checks]

        positions = rng.normal(size=(20, 3))
        estimated = positions + rng.normal(0.0, 0.01, positions.shape)
        R, t = exp_map(rng.normal(size=3)), rng.normal(size=3)
        moved = estimated @ R.T + t
        base = np.sqrt(np.mean(translation_errors(estimated, positions) ** 2))
        diff = abs(base - np.sqrt(np.mean(translation_errors(moved, positions) ** 2)))
        results.append(CheckResult("properties", f"seed {seed} ATE gauge invariance", diff < 1e-9, f"{diff:.2e}"))
    return results


SUITES: Dict[str, Callable[[Iterable[int]], List[CheckResult]]] = {
    "gradients": gradient_suite,
    "oracle": oracle_suite,
    "properties": property_suite,
}


def run_verification(suite: str = "all", seeds: int = DEFAULT_SEEDS) -> List[CheckResult]:
    """Run one named suite (or all of them) over `seeds` random seeds and log a pass/fail table."""
    if suite != "all" and suite not in SUITES:
        raise InvalidArgumentError(f"Unknown suite '{suite}', expected one of {sorted(SUITES)} or 'all'")
    names = sorted(SUITES) if suite == "all" else [suite]
    results = []
    for name in names:
        results += SUITES[name](range(seeds))
    log_table(results)
    return results


def log_table(results: List[CheckResult]) -> None:
    width = max((len(r.name) for r in results), default=10)
    for r in results:
        logger.info(f"{r.suite:<11} {r.name:<{width}} {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    failed = sum(not r.passed for r in results)
    logger.info(f"{len(results) - failed}/{len(results)} checks passed")
