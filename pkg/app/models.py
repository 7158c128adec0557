from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Schema(BaseModel):
    """Base for configuration records: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# Camera and rendering
class CameraIntrinsics(Schema):
    fx: float = Field(default=64.0, gt=0)
    fy: float = Field(default=64.0, gt=0)
    cx: float = 32.0
    cy: float = 32.0
    width: int = Field(default=64, gt=0)
    height: int = Field(default=64, gt=0)
    depth_scale: float = Field(default=5000.0, gt=0)
    near: float = Field(default=0.01, gt=0)
    far: float = Field(default=10.0, gt=0)

    @model_validator(mode="after")
    def check_depth_range(self) -> "CameraIntrinsics":
        if self.near >= self.far:
            raise ValueError(f"near ({self.near}) must be smaller than far ({self.far})")
        return self

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of the same camera at a resampled resolution."""
        width = max(1, int(round(self.width * factor)))
        height = max(1, int(round(self.height * factor)))
        return self.model_copy(
            update={
                "fx": self.fx * factor,
                "fy": self.fy * factor,
                "cx": (self.cx + 0.5) * factor - 0.5,
                "cy": (self.cy + 0.5) * factor - 0.5,
                "width": width,
                "height": height,
            }
        )


class RasterSettings(Schema):
    tile_size: int = Field(default=16, gt=0)
    max_alpha: float = Field(default=0.99, gt=0, lt=1.0)
    min_alpha: float = Field(default=1.0 / 255.0, ge=0)
    termination: float = Field(default=1e-4, ge=0)
    cutoff_sigma: float = Field(default=3.0, gt=0)
    dilation: float = Field(default=0.3, ge=0)


# Objectives
class LossWeights(Schema):
    """Weights of the mapping objective (color, ssim, geo, align, iso, var) and the tracking objective."""

    color: float = Field(default=0.7, ge=0)
    ssim: float = Field(default=0.1, ge=0)
    geo: float = Field(default=0.25, ge=0)
    align: float = Field(default=0.25, ge=0)
    iso: float = Field(default=0.1, ge=0)
    var: float = Field(default=0.15, ge=0)
    track_color: float = Field(default=0.2, ge=0)
    track_geo: float = Field(default=1.0, ge=0)
    iso_epsilon: float = Field(default=1.0, ge=1.0)
    opacity_floor: float = Field(default=0.1, ge=0, lt=1.0)
    normalize_by_valid_pixels: bool = True
    detach_variance_weights: bool = False

    @classmethod
    def replica(cls) -> "LossWeights":
        return cls()

    @classmethod
    def tum(cls) -> "LossWeights":
        return cls(color=1.0, ssim=0.1, geo=0.8, align=0.5, iso=0.1, var=0.5, track_color=1.0, track_geo=0.6)


# Tracking
class TrackerConfig(Schema):
    rotation_lr: float = Field(default=0.0015, gt=0)
    translation_lr: float = Field(default=0.00215, gt=0)
    iterations: int = Field(default=15, gt=0)
    window_size: int = Field(default=4, ge=2)
    keyframe_interval: int = Field(default=30, gt=0)
    recent_keyframes: int = Field(default=2, ge=0)
    descriptor_grid: int = Field(default=8, gt=0)
    descriptor_bins: int = Field(default=16, gt=0)
    ba_iterations: int = Field(default=10, ge=0)
    freeze_oldest: bool = True
    degraded_ratio: float = Field(default=2.0, gt=1.0)

    @property
    def descriptor_length(self) -> int:
        return self.descriptor_grid**2 + 3 * self.descriptor_bins


# Uncertainty
class UncertaintyConfig(Schema):
    enabled: bool = True
    tau: float = Field(default=0.025, gt=0)
    reduced_opacity: float = Field(default=0.005, gt=0, lt=0.1)
    window: List[int] = Field(default_factory=list)


# Mapping
class LearningRates(Schema):
    means: float = Field(default=1.6e-4, gt=0)
    sh: float = Field(default=2.5e-3, gt=0)
    opacity: float = Field(default=5e-2, gt=0)
    scale: float = Field(default=5e-3, gt=0)
    rotation: float = Field(default=1e-3, gt=0)


class DensifyConfig(Schema):
    enabled: bool = True
    grad_threshold: float = Field(default=2e-4, gt=0)
    interval: int = Field(default=100, gt=0)
    percent_dense: float = Field(default=0.01, gt=0)
    split_factor: float = Field(default=1.6, gt=1.0)
    split_count: int = Field(default=2, ge=2)
    min_opacity: float = Field(default=0.005, gt=0, lt=1.0)


class MappingConfig(Schema):
    iterations: int = Field(default=60, ge=0)
    init_iterations: int = Field(default=200, ge=0)
    init_stride: int = Field(default=1, gt=0)
    spawn_stride: int = Field(default=2, gt=0)
    spawn_threshold: float = Field(default=0.5, gt=0, le=1.0)
    initial_opacity: float = Field(default=0.5, gt=0, lt=1.0)
    initial_scale_factor: float = Field(default=0.5, gt=0)
    sh_degree: int = Field(default=0, ge=0, le=3)
    lr: LearningRates = Field(default_factory=LearningRates)
    densify: DensifyConfig = Field(default_factory=DensifyConfig)


# Synthetic data
class SceneSpec(Schema):
    num_primitives: int = Field(default=5000, gt=0)
    extent: float = Field(default=4.0, gt=0)
    num_objects: int = Field(default=3, ge=0)
    primitive_scale: float = Field(default=0.0, ge=0)
    opacity: float = Field(default=0.95, gt=0, lt=1.0)
    # wall primitive thickness relative to in-plane size; 1 makes every primitive isotropic
    flatness: float = Field(default=0.2, gt=0, le=1.0)


class TrajectorySpec(Schema):
    kind: Literal["circle"] = "circle"
    num_frames: int = Field(default=50, gt=0)
    radius: float = Field(default=0.5, ge=0)
    height: float = 0.0
    # fraction of a full turn; 1 closes the loop
    arc: float = Field(default=1.0, ge=0, le=1.0)
    frame_rate: float = Field(default=30.0, gt=0)


class NoiseSpec(Schema):
    depth_sigma: float = Field(default=0.0, ge=0)
    color_sigma: float = Field(default=0.0, ge=0)


class SyntheticConfig(Schema):
    scene: SceneSpec = Field(default_factory=SceneSpec)
    trajectory: TrajectorySpec = Field(default_factory=TrajectorySpec)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)


class DatasetConfig(Schema):
    format: Literal["synthetic", "tum", "directory"] = "synthetic"
    path: Optional[Path] = None
    max_frames: Optional[int] = Field(default=None, gt=0)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)

    @model_validator(mode="after")
    def check_path(self) -> "DatasetConfig":
        if self.format == "synthetic":
            return self
        if self.path is None:
            raise ValueError(f"dataset.path is required for format '{self.format}'")
        if not self.path.exists():
            raise ValueError(f"dataset.path does not exist: {self.path}")
        return self


# Run
class RunConfig(Schema):
    preset: Literal["replica", "tum"] = "replica"
    seed: int = 0
    threads: int = Field(default=1, gt=0)
    light: bool = False
    output_dir: Path = Path("runs/latest")
    checkpoint_every: int = Field(default=1, ge=0)
    dump_renders: bool = False
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    intrinsics: CameraIntrinsics = Field(default_factory=CameraIntrinsics)
    weights: LossWeights = Field(default_factory=LossWeights)
    tracker: TrackerConfig = Field(default_factory=TrackerConfig)
    mapping: MappingConfig = Field(default_factory=MappingConfig)
    uncertainty: UncertaintyConfig = Field(default_factory=UncertaintyConfig)
    raster: RasterSettings = Field(default_factory=RasterSettings)

    @field_validator("output_dir")
    @classmethod
    def check_output_dir(cls, value: Path) -> Path:
        if value.exists() and not value.is_dir():
            raise ValueError(f"output_dir exists and is not a directory: {value}")
        return value
