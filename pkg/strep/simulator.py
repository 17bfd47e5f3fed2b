"""Synthetic 2D LiDAR benchmark: occupancy-grid environments, random agent
trajectories and ray-cast scans with ground-truth poses.

World coordinates are pixels. Cell (ix, iy) of a map covers [ix, ix+1) x [iy, iy+1)
and is stored at `occupancy[iy, ix]`.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from scipy import ndimage

from strep.config import TrajectorySpec
from strep.errors import GenerationError, UsageError
from strep.geometry import PointSet, Pose, inverse

logger = logging.getLogger(__name__)

GENERATOR_VERSION = "strep-sim/2"
MIN_RANGE = 0.5
START_CLEARANCE = 20.0
STEP_TRIES = 100
RESTARTS = 1000
DEFAULT_TRAJECTORIES = (7, 7, 6)


@dataclass(frozen=True)
class EnvironmentMap:
    name: str
    occupancy: np.ndarray  # bool, (height, width), True = obstacle

    def __post_init__(self):
        grid = np.array(self.occupancy, dtype=bool)
        if grid.ndim != 2 or min(grid.shape) < 3:
            raise UsageError(f"environment '{self.name}' needs a 2D grid of at least 3x3 cells")
        if not (grid[0].all() and grid[-1].all() and grid[:, 0].all() and grid[:, -1].all()):
            raise UsageError(f"environment '{self.name}' must have an occupied boundary")
        if grid.all():
            raise UsageError(f"environment '{self.name}' has no free cell")
        grid.setflags(write=False)
        object.__setattr__(self, "occupancy", grid)

    @property
    def height(self) -> int:
        return int(self.occupancy.shape[0])

    @property
    def width(self) -> int:
        return int(self.occupancy.shape[1])

    def occupied_at(self, xy: np.ndarray) -> np.ndarray:
        """Occupancy of the cells containing world points; outside the map counts as occupied."""
        xy = np.asarray(xy, dtype=np.float64)
        ix = np.floor(xy[..., 0]).astype(np.int64)
        iy = np.floor(xy[..., 1]).astype(np.int64)
        inside = (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)
        result = np.ones(ix.shape, dtype=bool)
        result[inside] = self.occupancy[iy[inside], ix[inside]]
        return result

    def clearance(self) -> np.ndarray:
        """Distance (px) from every free cell centre to the nearest obstacle cell."""
        return ndimage.distance_transform_edt(~self.occupancy)


@dataclass
class SequenceDataset:
    dim: int
    frames: list[PointSet]
    gt_poses: Optional[list[Pose]] = None
    env_name: Optional[str] = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise UsageError("a sequence needs at least one frame")
        if any(frame.dim != self.dim for frame in self.frames):
            raise UsageError(f"every frame of a {self.dim}D sequence must be {self.dim}D")
        if self.gt_poses is not None:
            if len(self.gt_poses) != len(self.frames):
                raise UsageError(f"{len(self.gt_poses)} ground-truth poses for {len(self.frames)} frames")
            if any(pose.dim != self.dim for pose in self.gt_poses):
                raise UsageError("ground-truth poses must match the sequence dimension")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def has_gt(self) -> bool:
        return self.gt_poses is not None


# --- built-in environments -----------------------------------------------------


def _blank(size: int) -> np.ndarray:
    grid = np.zeros((size, size), dtype=bool)
    grid[:4, :] = grid[-4:, :] = True
    grid[:, :4] = grid[:, -4:] = True
    return grid


def _box(grid: np.ndarray, x0: int, y0: int, x1: int, y1: int) -> None:
    grid[y0:y1, x0:x1] = True


def corridor_loop(size: int = 512) -> EnvironmentMap:
    """Square ring corridor around a solid central block, with two alcoves."""
    grid = _blank(size)
    _box(grid, 4, 4, size - 4, 40)
    _box(grid, 4, size - 40, size - 4, size - 4)
    _box(grid, 4, 4, 40, size - 4)
    _box(grid, size - 40, 4, size - 4, size - 4)
    _box(grid, 170, 170, size - 170, size - 170)
    _box(grid, 170, 120, 190, 170)
    _box(grid, size - 190, size - 170, size - 170, size - 120)
    return EnvironmentMap("corridor_loop", grid)


def two_room_office(size: int = 512) -> EnvironmentMap:
    """Two rooms joined by a door, with desks and a cabinet."""
    grid = _blank(size)
    mid = size // 2
    _box(grid, mid - 4, 4, mid + 4, mid - 40)
    _box(grid, mid - 4, mid + 40, mid + 4, size - 4)
    _box(grid, 90, 100, 170, 130)
    _box(grid, 90, 330, 170, 360)
    _box(grid, mid + 80, 80, mid + 110, 200)
    _box(grid, mid + 60, 380, size - 60, 400)
    return EnvironmentMap("two_room_office", grid)


def cluttered_hall(size: int = 512, pillars: int = 18) -> EnvironmentMap:
    """Open hall with scattered square and round pillars (fixed layout)."""
    grid = _blank(size)
    layout = np.random.default_rng(2020)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for i in range(pillars):
        cx, cy = layout.uniform(60, size - 60, size=2)
        radius = layout.uniform(6, 16)
        if i % 2:
            grid |= (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
        else:
            r = int(radius)
            _box(grid, int(cx) - r, int(cy) - r, int(cx) + r, int(cy) + r)
    return EnvironmentMap("cluttered_hall", grid)


def builtin_environments() -> list[EnvironmentMap]:
    return [corridor_loop(), two_room_office(), cluttered_hall()]


# --- trajectories and scans ----------------------------------------------------------


def _cell_walk(
    env: EnvironmentMap, origin: np.ndarray, directions: np.ndarray, max_t: float
) -> tuple[np.ndarray, np.ndarray]:
    """Visit every cell each ray passes through, in order, up to distance `max_t`.

    Amanatides-Woo traversal over all rays at once: each round advances every live
    ray across its nearest cell boundary. Returns (hit, cells): whether the ray met
    an occupied cell and the index of the first such cell. Directions are unit
    vectors; a ray through a cell corner visits the x neighbour before the diagonal.
    """
    count = directions.shape[0]
    cells = np.repeat(np.floor(origin).astype(np.int64)[None, :], count, axis=0)
    step = np.sign(directions).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inverse_dir = np.where(directions != 0.0, 1.0 / directions, np.inf)
        t_max = np.where(step != 0, (cells + (step > 0) - origin) * inverse_dir, np.inf)
    t_delta = np.abs(inverse_dir)

    hit = np.zeros(count, dtype=bool)
    live = np.arange(count)
    while live.size:
        axis = (t_max[live, 1] < t_max[live, 0]).astype(np.intp)
        within = t_max[live, axis] <= max_t
        live, axis = live[within], axis[within]
        cells[live, axis] += step[live, axis]
        t_max[live, axis] += t_delta[live, axis]
        blocked = env.occupied_at(cells[live] + 0.5)
        hit[live[blocked]] = True
        live = live[~blocked]
    return hit, cells


def _segment_free(env: EnvironmentMap, start: np.ndarray, end: np.ndarray) -> bool:
    if env.occupied_at(start).item():
        return False
    length = float(np.linalg.norm(end - start))
    if length == 0.0:
        return True
    hit, _ = _cell_walk(env, start, ((end - start) / length)[None, :], length)
    return not hit[0]


def _start_pose(env: EnvironmentMap, rng: np.random.Generator) -> Pose:
    clearance = env.clearance()
    iy, ix = np.nonzero(clearance >= START_CLEARANCE)
    if ix.size == 0:
        raise GenerationError(f"environment '{env.name}' has no cell with {START_CLEARANCE} px clearance")
    pick = rng.integers(ix.size)
    position = np.array([ix[pick] + 0.5, iy[pick] + 0.5])
    return Pose(position, np.array([rng.uniform(-math.pi, math.pi)]))


def sample_trajectory(env: EnvironmentMap, spec: TrajectorySpec, rng: np.random.Generator) -> list[Pose]:
    """Random agent walk: heading change in +-rot_range, then travel along the new heading."""
    low, high = spec.trans_range
    for restart in range(RESTARTS):
        poses = [_start_pose(env, rng)]
        while len(poses) < spec.num_frames:
            current = poses[-1]
            for _ in range(STEP_TRIES):
                heading = current.rotation[0] + rng.uniform(-spec.rot_range, spec.rot_range)
                length = rng.uniform(low, high)
                position = current.translation + length * np.array([math.cos(heading), math.sin(heading)])
                if _segment_free(env, current.translation, position):
                    poses.append(Pose(position, np.array([heading])))
                    break
            else:
                logger.debug(f"{env.name}: stuck after {len(poses)} poses, restart {restart + 1}")
                break
        if len(poses) == spec.num_frames:
            return poses
    raise GenerationError(f"no valid trajectory in '{env.name}' after {RESTARTS} restarts")


def beam_angles(pose: Pose, spec: TrajectorySpec) -> np.ndarray:
    offsets = -spec.fov / 2 + spec.fov * (np.arange(spec.beams) + 0.5) / spec.beams
    return pose.rotation[0] + offsets


def raycast_scan(
    env: EnvironmentMap, pose: Pose, spec: TrajectorySpec, rng: Optional[np.random.Generator] = None
) -> PointSet:
    """Walk every beam cell by cell to the first occupied cell it enters.

    Hits are the centres of the hit cells, returned in sensor-local coordinates and
    ordered by beam angle; beams without a hit inside max_range are dropped.
    """
    if pose.dim != 2:
        raise UsageError("the simulator is 2D only")
    if env.occupied_at(pose.translation).item():
        raise GenerationError(f"sensor at {pose.translation.tolist()} is inside an obstacle")
    angles = beam_angles(pose, spec)
    directions = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    hit, cells = _cell_walk(env, pose.translation, directions, spec.max_range)
    if not hit.any():
        raise GenerationError(f"no beam hits an obstacle from {pose.translation.tolist()}")
    cells = cells[hit] + 0.5
    if spec.range_noise > 0:
        if rng is None:
            raise UsageError("range noise needs a random generator")
        offsets = cells - pose.translation
        distances = np.linalg.norm(offsets, axis=1)
        noisy = distances + rng.normal(0.0, spec.range_noise, size=distances.shape)
        cells = pose.translation + offsets * (np.maximum(noisy, MIN_RANGE) / distances)[:, None]
    return PointSet(inverse(pose).transform(cells))


def simulate_sequence(
    env: EnvironmentMap, spec: TrajectorySpec, rng: np.random.Generator, seed: Optional[int] = None
) -> SequenceDataset:
    poses = sample_trajectory(env, spec, rng)
    frames = [raycast_scan(env, pose, spec, rng) for pose in poses]
    return SequenceDataset(
        dim=2,
        frames=frames,
        gt_poses=poses,
        env_name=env.name,
        metadata={"seed": seed, "generator_version": GENERATOR_VERSION},
    )


def generate_benchmark(
    envs: Optional[Sequence[EnvironmentMap]] = None,
    trajectories_per_env: Optional[Sequence[int] | int] = None,
    spec: Optional[TrajectorySpec] = None,
    seed: int = 0,
) -> list[SequenceDataset]:
    """Deterministic suite; by default 3 built-in maps with 7, 7 and 6 trajectories."""
    envs = list(envs) if envs is not None else builtin_environments()
    if not envs:
        raise UsageError("the benchmark needs at least one environment")
    if trajectories_per_env is None:
        counts = list(DEFAULT_TRAJECTORIES) if len(envs) == len(DEFAULT_TRAJECTORIES) else [1] * len(envs)
    elif isinstance(trajectories_per_env, int):
        counts = [trajectories_per_env] * len(envs)
    else:
        counts = list(trajectories_per_env)
    if len(counts) != len(envs):
        raise UsageError(f"{len(counts)} trajectory counts for {len(envs)} environments")
    spec = spec or TrajectorySpec()

    streams = np.random.SeedSequence(seed).spawn(sum(counts))
    sequences = []
    for env, count in zip(envs, counts):
        for _ in range(count):
            index = len(sequences)
            sequences.append(simulate_sequence(env, spec, np.random.default_rng(streams[index]), seed=seed))
            logger.debug(f"generated sequence {index} in {env.name}")
    logger.info(f"generated {len(sequences)} sequences from {len(envs)} environments")
    return sequences
