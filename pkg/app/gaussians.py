"""Gaussian primitives, the struct-of-arrays map container and spherical-harmonic colour."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import InvalidArgumentError, NonFiniteParameterError
from app.geometry import build_covariance, build_covariances

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

PARAMETER_NAMES = ("means", "log_scales", "quats", "opacity_logits", "sh")


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def logit(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.log(p / (1.0 - p))


def sh_coefficient_count(degree: int) -> int:
    return (degree + 1) ** 2


def rgb_to_sh0(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb, dtype=float) - 0.5) / SH_C0


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values (N, (degree+1)^2) for unit directions (N, 3)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    terms = [np.full_like(x, SH_C0)]
    if degree >= 1:
        terms += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        terms += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        terms += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(terms, axis=-1)


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Partial derivatives (N, K, 3) of every basis function with respect to the direction components."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        rows += [(zero, -SH_C1 + zero, zero), (zero, zero, SH_C1 + zero), (-SH_C1 + zero, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero),
        ]
    if degree >= 3:
        rows += [
            (SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (SH_C3[2] * -2 * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), SH_C3[2] * 8 * y * z),
            (SH_C3[3] * -6 * x * z, SH_C3[3] * -6 * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (SH_C3[4] * (4 * zz - 3 * xx - yy), SH_C3[4] * -2 * x * y, SH_C3[4] * 8 * x * z),
            (SH_C3[5] * 2 * x * z, SH_C3[5] * -2 * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3 * xx - 3 * yy), SH_C3[6] * -6 * x * y, zero),
        ]
    return np.stack([np.stack(row, axis=-1) for row in rows], axis=1)


def eval_colors(sh: np.ndarray, view: np.ndarray, degree: int) -> Tuple[np.ndarray, np.ndarray]:
    """Colours (N, 3) from SH coefficients (N, K, 3) and unnormalized view vectors mean - camera centre.

    Returns the colours clamped at zero and the mask of unclamped channels.
    """
    if degree == 0:
        raw = SH_C0 * sh[:, 0, :] + 0.5
    else:
        dirs = view / np.linalg.norm(view, axis=-1, keepdims=True)
        raw = np.einsum("nk,nkc->nc", sh_basis(dirs, degree), sh[:, : sh_coefficient_count(degree), :]) + 0.5
    unclamped = raw > 0
    return np.where(unclamped, raw, 0.0), unclamped


def eval_colors_backward(
    sh: np.ndarray, view: np.ndarray, degree: int, unclamped: np.ndarray, grad_colors: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients with respect to the SH coefficients (N, K, 3) and the view vectors (N, 3)."""
    g = np.where(unclamped, grad_colors, 0.0)
    grad_sh = np.zeros_like(sh)
    if degree == 0:
        grad_sh[:, 0, :] = SH_C0 * g
        return grad_sh, np.zeros_like(view)

    norm = np.linalg.norm(view, axis=-1, keepdims=True)
    dirs = view / norm
    K = sh_coefficient_count(degree)
    grad_sh[:, :K, :] = sh_basis(dirs, degree)[:, :, None] * g[:, None, :]
    # d colour / d dir, then through the normalization
    weighted = np.einsum("nkc,nc->nk", sh[:, :K, :], g)
    grad_dir = np.einsum("nk,nkd->nd", weighted, sh_basis_grad(dirs, degree))
    grad_view = (grad_dir - dirs * np.sum(dirs * grad_dir, axis=-1, keepdims=True)) / norm
    return grad_sh, grad_view


@dataclass
class DominatedStats:
    weight_sum: float = 0.0
    sq_error_sum: float = 0.0
    pixel_count: int = 0


@dataclass
class GaussianPrimitive:
    """One anisotropic Gaussian: geometry, appearance, opacity and uncertainty state."""

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    sh_coeffs: np.ndarray
    uncertainty: float = 0.0
    dominated_stats: DominatedStats = field(default_factory=DominatedStats)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        self.scale = np.asarray(self.scale, dtype=float).reshape(3)
        rotation = np.asarray(self.rotation, dtype=float).reshape(4)
        self.rotation = rotation / np.linalg.norm(rotation)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=float).reshape(-1, 3)
        if np.any(self.scale <= 0):
            raise InvalidArgumentError(f"scale components must be positive, got {self.scale}")
        if not 0.0 < self.opacity < 1.0:
            raise InvalidArgumentError(f"opacity must lie in (0, 1), got {self.opacity}")
        if self.uncertainty < 0:
            raise InvalidArgumentError(f"uncertainty must be non-negative, got {self.uncertainty}")

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.scale, self.rotation)

    @classmethod
    def from_color(
        cls, mean, scale, rgb, opacity: float = 0.5, rotation=(1.0, 0.0, 0.0, 0.0), sh_degree: int = 0
    ) -> "GaussianPrimitive":
        sh = np.zeros((sh_coefficient_count(sh_degree), 3))
        sh[0] = rgb_to_sh0(rgb)
        return cls(mean=mean, scale=scale, rotation=rotation, opacity=opacity, sh_coeffs=sh)


@dataclass
class GaussianCloud:
    """All primitives of a map as co-indexed parameter arrays (the optimizer's view of the map).

    Stored parameterization: log-scales, raw quaternions (re-normalized after each step),
    opacity logits, and SH coefficients of shape (N, K, 3).
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    uncertainty: np.ndarray
    dominated_weight: np.ndarray
    dominated_sq_error: np.ndarray
    dominated_count: np.ndarray
    sh_degree: int = 0

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianCloud":
        K = sh_coefficient_count(sh_degree)
        return cls(
            means=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            quats=np.zeros((0, 4)),
            opacity_logits=np.zeros(0),
            sh=np.zeros((0, K, 3)),
            uncertainty=np.zeros(0),
            dominated_weight=np.zeros(0),
            dominated_sq_error=np.zeros(0),
            dominated_count=np.zeros(0, dtype=np.int64),
            sh_degree=sh_degree,
        )

    @classmethod
    def from_points(
        cls,
        points: np.ndarray,
        colors: np.ndarray,
        scales: np.ndarray,
        opacity: float | np.ndarray = 0.5,
        quats: Optional[np.ndarray] = None,
        sh_degree: int = 0,
    ) -> "GaussianCloud":
        """Build a cloud from world points, RGB colours in [0, 1] and per-axis (or isotropic) scales."""
        n = len(points)
        scales = np.asarray(scales, dtype=float)
        if scales.ndim == 1:
            scales = np.repeat(scales[:, None], 3, axis=1)
        if quats is None:
            quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        sh = np.zeros((n, sh_coefficient_count(sh_degree), 3))
        sh[:, 0, :] = rgb_to_sh0(colors)
        opacity = np.broadcast_to(np.asarray(opacity, dtype=float), (n,))
        return cls(
            means=np.array(points, dtype=float).reshape(n, 3),
            log_scales=np.log(scales),
            quats=np.array(quats, dtype=float),
            opacity_logits=logit(opacity).copy(),
            sh=sh,
            uncertainty=np.zeros(n),
            dominated_weight=np.zeros(n),
            dominated_sq_error=np.zeros(n),
            dominated_count=np.zeros(n, dtype=np.int64),
            sh_degree=sh_degree,
        )

    @classmethod
    def from_primitives(cls, primitives: Sequence[GaussianPrimitive], sh_degree: int = 0) -> "GaussianCloud":
        if not primitives:
            return cls.empty(sh_degree)
        K = sh_coefficient_count(sh_degree)
        sh = np.zeros((len(primitives), K, 3))
        for i, p in enumerate(primitives):
            count = min(K, len(p.sh_coeffs))
            sh[i, :count] = p.sh_coeffs[:count]
        return cls(
            means=np.stack([p.mean for p in primitives]),
            log_scales=np.log(np.stack([p.scale for p in primitives])),
            quats=np.stack([p.rotation for p in primitives]),
            opacity_logits=logit(np.array([p.opacity for p in primitives])),
            sh=sh,
            uncertainty=np.array([p.uncertainty for p in primitives], dtype=float),
            dominated_weight=np.array([p.dominated_stats.weight_sum for p in primitives], dtype=float),
            dominated_sq_error=np.array([p.dominated_stats.sq_error_sum for p in primitives], dtype=float),
            dominated_count=np.array([p.dominated_stats.pixel_count for p in primitives], dtype=np.int64),
            sh_degree=sh_degree,
        )

    def __len__(self) -> int:
        return len(self.means)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def unit_quats(self) -> np.ndarray:
        return self.quats / np.linalg.norm(self.quats, axis=-1, keepdims=True)

    @property
    def covariances(self) -> np.ndarray:
        return build_covariances(self.scales, self.quats)

    @property
    def base_colors(self) -> np.ndarray:
        """View-independent colour (degree-0 term) of every primitive."""
        return np.clip(SH_C0 * self.sh[:, 0, :] + 0.5, 0.0, 1.0)

    @property
    def nbytes(self) -> int:
        return sum(getattr(self, name).nbytes for name in PARAMETER_NAMES) + self.uncertainty.nbytes

    def parameters(self) -> Dict[str, np.ndarray]:
        """The optimizable arrays, by reference (in-place updates change the cloud)."""
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    def primitive(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mean=self.means[index].copy(),
            scale=self.scales[index].copy(),
            rotation=self.unit_quats[index].copy(),
            opacity=float(np.clip(self.opacities[index], 1e-12, 1 - 1e-12)),
            sh_coeffs=self.sh[index].copy(),
            uncertainty=float(self.uncertainty[index]),
            dominated_stats=DominatedStats(
                weight_sum=float(self.dominated_weight[index]),
                sq_error_sum=float(self.dominated_sq_error[index]),
                pixel_count=int(self.dominated_count[index]),
            ),
        )

    def to_primitives(self) -> List[GaussianPrimitive]:
        return [self.primitive(i) for i in range(len(self))]

    def copy(self) -> "GaussianCloud":
        return self.select(np.arange(len(self)))

    def select(self, index: np.ndarray) -> "GaussianCloud":
        """Sub-cloud of the given rows (boolean mask or integer index), as copies."""
        return GaussianCloud(
            means=self.means[index].copy(),
            log_scales=self.log_scales[index].copy(),
            quats=self.quats[index].copy(),
            opacity_logits=self.opacity_logits[index].copy(),
            sh=self.sh[index].copy(),
            uncertainty=self.uncertainty[index].copy(),
            dominated_weight=self.dominated_weight[index].copy(),
            dominated_sq_error=self.dominated_sq_error[index].copy(),
            dominated_count=self.dominated_count[index].copy(),
            sh_degree=self.sh_degree,
        )

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        if other.sh_degree != self.sh_degree:
            raise InvalidArgumentError(f"SH degree mismatch: {self.sh_degree} vs {other.sh_degree}")
        return GaussianCloud(
            means=np.concatenate([self.means, other.means]),
            log_scales=np.concatenate([self.log_scales, other.log_scales]),
            quats=np.concatenate([self.quats, other.quats]),
            opacity_logits=np.concatenate([self.opacity_logits, other.opacity_logits]),
            sh=np.concatenate([self.sh, other.sh]),
            uncertainty=np.concatenate([self.uncertainty, other.uncertainty]),
            dominated_weight=np.concatenate([self.dominated_weight, other.dominated_weight]),
            dominated_sq_error=np.concatenate([self.dominated_sq_error, other.dominated_sq_error]),
            dominated_count=np.concatenate([self.dominated_count, other.dominated_count]),
            sh_degree=self.sh_degree,
        )

    def normalize_rotations(self) -> None:
        self.quats /= np.linalg.norm(self.quats, axis=-1, keepdims=True)

    def check_finite(self) -> None:
        """Raise NonFiniteParameterError naming the first primitive with a NaN/inf parameter."""
        for name in PARAMETER_NAMES:
            values = getattr(self, name).reshape(len(self), -1)
            bad = ~np.all(np.isfinite(values), axis=1)
            if np.any(bad):
                raise NonFiniteParameterError(int(np.argmax(bad)), name)
