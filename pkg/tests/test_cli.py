"""Tests for the command-line entry points and their exit codes."""

import numpy as np
import pytest

from app.checkpoint import read_ply_points, save_checkpoint
from app.cli import EXIT_OK, EXIT_USAGE, main
from app.dataset_io import write_tum_trajectory
from app.geometry import CameraPose
from app.models import CameraIntrinsics
from app.verification import random_scene


@pytest.fixture
def checkpoint(tmp_path):
    cloud = random_scene(np.random.default_rng(1), 20, CameraIntrinsics(), sh_degree=0)
    return save_checkpoint(cloud, 5, tmp_path / "map.ckpt")


@pytest.fixture
def trajectory(tmp_path):
    poses = [CameraPose([0.0, 0.01 * k, 0.0], [0.02 * k, 0.0, 0.0]) for k in range(4)]
    return write_tum_trajectory(tmp_path / "trajectory.txt", [0.1 * k for k in range(4)], poses)


def test_usage_errors_exit_with_two():
    """Unknown commands and unknown suites are usage errors."""
    assert main(["launch"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["verify", "speed"]) == EXIT_USAGE


def test_help_exits_cleanly():
    assert main(["--help"]) == EXIT_OK


def test_eval_identical_trajectories(trajectory, tmp_path):
    """A trajectory evaluated against itself scores zero and writes a report on request."""
    assert main(["eval", str(trajectory), str(trajectory), "--out", str(tmp_path / "report")]) == EXIT_OK
    line = (tmp_path / "report" / "metrics.txt").read_text().strip()
    assert line.startswith("ate_rmse_cm=")
    assert float(line.split("=")[1]) == pytest.approx(0.0, abs=1e-6)


def test_eval_with_too_few_poses(trajectory, tmp_path):
    short = tmp_path / "short.txt"
    short.write_text("\n".join(trajectory.read_text().splitlines()[:3]) + "\n")
    assert main(["eval", str(short), str(trajectory)]) == EXIT_USAGE


def test_render_writes_a_view_per_pose(checkpoint, trajectory, tmp_path):
    """Every pose yields a colour and a depth image."""
    out = tmp_path / "views"
    assert main(["render", str(checkpoint), str(trajectory), "--out", str(out)]) == EXIT_OK
    expected = [f"{k:06d}_{kind}.png" for k in range(4) for kind in ("color", "depth")]
    assert sorted(p.name for p in out.iterdir()) == expected


def test_render_with_no_poses_writes_nothing(checkpoint, tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("# timestamp tx ty tz qx qy qz qw\n")
    out = tmp_path / "views"
    assert main(["render", str(checkpoint), str(empty), "--out", str(out)]) == EXIT_OK
    assert not out.exists()


def test_render_rejects_foreign_files(trajectory, tmp_path):
    bogus = tmp_path / "bogus.ckpt"
    bogus.write_bytes(b"\x00" * 64)
    assert main(["render", str(bogus), str(trajectory)]) == EXIT_USAGE


def test_export_writes_ply(checkpoint, tmp_path):
    out = tmp_path / "map.ply"
    assert main(["export", str(checkpoint), str(out)]) == EXIT_OK
    points, _ = read_ply_points(out)
    assert len(points) == 20


def test_verify_properties_passes():
    assert main(["verify", "properties", "--seeds", "1"]) == EXIT_OK
