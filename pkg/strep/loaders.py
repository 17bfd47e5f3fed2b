"""Readers for sequences that do not come from the simulator.

A point sequence directory holds `frame_000.xyz`, `frame_001.xyz`, ... (whitespace
separated, one point per row), and optionally `poses.csv` with ground truth and
`origins.csv` (`frame,ox,oy[,oz]`) with sensor origins. A depth sequence directory
holds `depth_000.npy`, ... depth images plus the same optional `poses.csv`.
"""

import logging
import re
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from strep.datafiles import read_poses
from strep.errors import DatasetFormatError, StrepIOError, UsageError
from strep.geometry import PointSet
from strep.simulator import SequenceDataset

logger = logging.getLogger(__name__)

FRAME_PATTERN = re.compile(r"^frame_(\d+)\.xyz$")
DEPTH_PATTERN = re.compile(r"^depth_(\d+)\.npy$")


class CameraIntrinsics(BaseModel):
    fx: float = Field(gt=0, description="Focal length along image columns, pixels")
    fy: float = Field(gt=0, description="Focal length along image rows, pixels")
    cx: float = Field(description="Principal point column")
    cy: float = Field(description="Principal point row")
    depth_scale: float = Field(default=1000.0, gt=0, description="Raw depth units per metre")
    stride: int = Field(default=1, ge=1, description="Keep every stride-th pixel along both image axes")


def _numbered(directory: Path, pattern: re.Pattern) -> list[Path]:
    if not directory.is_dir():
        raise StrepIOError(f"{directory} is not a directory")
    found = []
    for path in directory.iterdir():
        match = pattern.match(path.name)
        if match:
            found.append((int(match.group(1)), path))
    if not found:
        raise StrepIOError(f"no files matching {pattern.pattern} in {directory}")
    return [path for _, path in sorted(found)]


def _read_xyz(path: Path) -> np.ndarray:
    try:
        points = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise DatasetFormatError(f"{path}: {e}")
    except OSError as e:
        raise StrepIOError(f"cannot read {path}: {e}")
    if points.shape[0] == 0 or points.shape[1] not in (2, 3):
        raise DatasetFormatError(f"{path}: expected rows of 2 or 3 coordinates, got shape {points.shape}")
    return points


def _read_origins(path: Path, count: int, dim: int) -> list[np.ndarray]:
    try:
        table = np.loadtxt(path, dtype=np.float64, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as e:
        raise DatasetFormatError(f"{path}: {e}")
    if table.shape != (count, dim + 1):
        raise DatasetFormatError(f"{path}: expected {count} rows of frame + {dim} coordinates, got {table.shape}")
    return [row[1:] for row in table]


def _attach_gt(directory: Path, frames: list[PointSet], dim: int, source: str) -> SequenceDataset:
    poses_path = directory / "poses.csv"
    gt = read_poses(poses_path) if poses_path.exists() else None
    if gt is not None and len(gt) != len(frames):
        raise DatasetFormatError(f"{poses_path}: {len(gt)} poses for {len(frames)} frames")
    try:
        dataset = SequenceDataset(dim=dim, frames=frames, gt_poses=gt, env_name=directory.name, metadata={"source": source})
    except UsageError as e:
        raise DatasetFormatError(f"{directory}: {e}")
    logger.info(f"loaded {len(frames)} frames from {directory}" + (" with ground truth" if gt else ""))
    return dataset


def load_point_sequence(directory: str | Path) -> SequenceDataset:
    directory = Path(directory)
    clouds = [_read_xyz(path) for path in _numbered(directory, FRAME_PATTERN)]
    dim = clouds[0].shape[1]
    if any(cloud.shape[1] != dim for cloud in clouds):
        raise DatasetFormatError(f"{directory}: frames mix 2D and 3D points")
    origins_path = directory / "origins.csv"
    origins: list[Optional[np.ndarray]] = (
        list(_read_origins(origins_path, len(clouds), dim)) if origins_path.exists() else [None] * len(clouds)
    )
    frames = [PointSet(cloud, origin) for cloud, origin in zip(clouds, origins)]
    return _attach_gt(directory, frames, dim, "xyz")


def depth_to_points(
    depth: np.ndarray,
    fx: float,
    fy: float,
    cx: float,
    cy: float,
    depth_scale: float = 1000.0,
    stride: int = 1,
) -> PointSet:
    """Back-project a depth image to camera-frame points (x right, y down, z forward).

    Pixels with zero or non-finite depth carry no measurement and are dropped.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise UsageError(f"depth image must be 2D, got shape {depth.shape}")
    if stride < 1:
        raise UsageError("stride must be >= 1")
    rows, cols = np.mgrid[0 : depth.shape[0] : stride, 0 : depth.shape[1] : stride]
    z = depth[rows, cols] / depth_scale
    valid = np.isfinite(z) & (z > 0)
    if not valid.any():
        raise UsageError("depth image has no valid pixel")
    z, u, v = z[valid], cols[valid], rows[valid]
    points = np.stack([(u - cx) * z / fx, (v - cy) * z / fy, z], axis=1)
    return PointSet(points)


def load_depth_sequence(directory: str | Path, camera: CameraIntrinsics) -> SequenceDataset:
    directory = Path(directory)
    frames = []
    for path in _numbered(directory, DEPTH_PATTERN):
        try:
            depth = np.load(path, allow_pickle=False)
        except (OSError, ValueError) as e:
            raise DatasetFormatError(f"{path}: {e}")
        frames.append(
            depth_to_points(depth, camera.fx, camera.fy, camera.cx, camera.cy, camera.depth_scale, camera.stride)
        )
    return _attach_gt(directory, frames, 3, "depth")
