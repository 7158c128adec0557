"""Binary map checkpoints and PLY point-cloud export."""

import logging
import struct
from pathlib import Path
from typing import List, Tuple

import numpy as np
from plyfile import PlyData, PlyElement

from app.errors import CheckpointError
from app.gaussians import GaussianCloud, sh_coefficient_count

logger = logging.getLogger(__name__)

MAGIC = b"GSMAPCK\x00"
VERSION = 1
# magic, version, sh degree, iteration, primitive count
HEADER = struct.Struct("<8sIIqQ")

# (name, trailing shape given K SH coefficients, dtype)
_LAYOUT = (
    ("means", lambda k: (3,), np.float64),
    ("log_scales", lambda k: (3,), np.float64),
    ("quats", lambda k: (4,), np.float64),
    ("opacity_logits", lambda k: (), np.float64),
    ("sh", lambda k: (k, 3), np.float64),
    ("uncertainty", lambda k: (), np.float64),
    ("dominated_weight", lambda k: (), np.float64),
    ("dominated_sq_error", lambda k: (), np.float64),
    ("dominated_count", lambda k: (), np.int64),
)


def save_checkpoint(cloud: GaussianCloud, iteration: int, path: Path) -> Path:
    """Write every primitive array little-endian after a versioned header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, cloud.sh_degree, iteration, len(cloud)))
        for name, _, dtype in _LAYOUT:
            f.write(np.ascontiguousarray(getattr(cloud, name), dtype=np.dtype(dtype).newbyteorder("<")).tobytes())
    tmp.replace(path)
    logger.info(f"Saved checkpoint with {len(cloud)} primitives at iteration {iteration} to {path}")
    return path


def load_checkpoint(path: Path) -> Tuple[GaussianCloud, int]:
    """Read a checkpoint back; returns the cloud and the mapping iteration counter."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if len(data) < HEADER.size:
        raise CheckpointError(f"{path} is too short to be a checkpoint")

    magic, version, sh_degree, iteration, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a map checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path} has checkpoint version {version}, expected {VERSION}")
    if sh_degree > 3:
        raise CheckpointError(f"{path} declares SH degree {sh_degree}")

    K = sh_coefficient_count(sh_degree)
    offset = HEADER.size
    arrays = {}
    for name, trailing, dtype in _LAYOUT:
        shape = (count,) + trailing(K)
        dt = np.dtype(dtype).newbyteorder("<")
        nbytes = int(np.prod(shape)) * dt.itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path} is truncated in '{name}'")
        raw = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)), offset=offset)
        arrays[name] = raw.reshape(shape).astype(dtype)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path} has {len(data) - offset} trailing bytes")
    return GaussianCloud(sh_degree=sh_degree, **arrays), iteration


def _ply_attributes(K: int) -> List[str]:
    names = ["x", "y", "z", "nx", "ny", "nz"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(3 * (K - 1))]
    names += ["opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
    return names


def export_ply(cloud: GaussianCloud, path: Path) -> Path:
    """Write primitive means with their colours and splat parameters as a binary PLY point cloud."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    K = cloud.sh.shape[1]
    f_dc = cloud.sh[:, 0, :]
    f_rest = np.transpose(cloud.sh[:, 1:, :], (0, 2, 1)).reshape(len(cloud), -1)
    attributes = np.concatenate(
        [
            cloud.means,
            np.zeros_like(cloud.means),
            f_dc,
            f_rest,
            cloud.opacity_logits[:, None],
            cloud.log_scales,
            cloud.unit_quats,
        ],
        axis=1,
    )
    dtype = [(name, "f4") for name in _ply_attributes(K)] + [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    elements = np.empty(len(cloud), dtype=dtype)
    for i, name in enumerate(_ply_attributes(K)):
        elements[name] = attributes[:, i]
    rgb = np.round(cloud.base_colors * 255.0).astype(np.uint8)
    elements["red"], elements["green"], elements["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    PlyData([PlyElement.describe(elements, "vertex")]).write(str(path))
    logger.info(f"Exported {len(cloud)} primitives to {path}")
    return path


def read_ply_points(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """Vertex positions (N, 3) and colours in [0, 1] (N, 3) of a PLY file."""
    try:
        vertex = PlyData.read(str(path))["vertex"]
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointError(f"Cannot read point cloud {path}: {e}") from e
    points = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=-1).astype(np.float64)
    names = vertex.data.dtype.names
    if {"red", "green", "blue"} <= set(names):
        colors = np.stack([vertex["red"], vertex["green"], vertex["blue"]], axis=-1).astype(np.float64) / 255.0
    else:
        colors = np.zeros_like(points)
    return points, colors
