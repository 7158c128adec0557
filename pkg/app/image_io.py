"""PNG codecs for RGB and 16-bit depth images, resampling, and debug dumps of rendered maps."""

import logging
from pathlib import Path

import cv2
import numpy as np

from app.errors import DatasetError

logger = logging.getLogger(__name__)

DEBUG_DEPTH_SCALE = 1000.0


def read_color(path: Path) -> np.ndarray:
    """RGB image as float64 in [0, 1]."""
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise DatasetError(f"Cannot read colour image {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def read_depth(path: Path, depth_scale: float) -> np.ndarray:
    """Depth in meters from a 16-bit PNG storing depth * depth_scale; zero marks holes."""
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DatasetError(f"Cannot read depth image {path}")
    if image.ndim != 2:
        raise DatasetError(f"Depth image {path} has {image.shape[2]} channels, expected 1")
    return image.astype(np.float64) / depth_scale


def write_color(path: Path, rgb: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    image = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
    cv2.imwrite(str(path), image)


def write_depth(path: Path, depth: np.ndarray, depth_scale: float = DEBUG_DEPTH_SCALE) -> None:
    """Write meters as a 16-bit PNG of depth * depth_scale (millimeters by default)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    scaled = np.nan_to_num(np.asarray(depth, dtype=np.float64) * depth_scale, nan=0.0, posinf=0.0, neginf=0.0)
    cv2.imwrite(str(path), np.clip(np.round(scaled), 0, 65535).astype(np.uint16))


def to_gray(rgb: np.ndarray) -> np.ndarray:
    image = np.asarray(rgb, dtype=np.float32)
    return cv2.cvtColor(image, cv2.COLOR_RGB2GRAY).astype(np.float64)


def downsample_color(rgb: np.ndarray, width: int, height: int) -> np.ndarray:
    image = cv2.resize(np.asarray(rgb, dtype=np.float32), (width, height), interpolation=cv2.INTER_AREA)
    return image.astype(np.float64)


def downsample_depth(depth: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour so sensor holes are not averaged into valid depth."""
    image = cv2.resize(np.asarray(depth, dtype=np.float32), (width, height), interpolation=cv2.INTER_NEAREST)
    return image.astype(np.float64)


def dump_render(output, frame_index: int, directory: Path) -> Path:
    """Write colour, opacity and both depth maps of a RenderOutput as PNGs prefixed by the frame index."""
    prefix = directory / f"{frame_index:06d}"
    write_color(prefix.with_name(f"{prefix.name}_color.png"), output.color)
    write_color(prefix.with_name(f"{prefix.name}_opacity.png"), output.opacity)
    write_depth(prefix.with_name(f"{prefix.name}_alpha_depth.png"), output.alpha_depth)
    median = np.where(output.median_valid, output.median_depth, 0.0)
    write_depth(prefix.with_name(f"{prefix.name}_median_depth.png"), median)
    logger.debug(f"Dumped render of frame {frame_index} to {directory}")
    return prefix
