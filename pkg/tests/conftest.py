import numpy as np
import pytest

from strep.config import RunConfig, TrainConfig, TrajectorySpec
from strep.geometry import PointSet, Pose
from strep.simulator import SequenceDataset, corridor_loop, simulate_sequence


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec() -> TrajectorySpec:
    return TrajectorySpec(num_frames=4, beams=48)


@pytest.fixture
def corridor_sequence(small_spec: TrajectorySpec) -> SequenceDataset:
    return simulate_sequence(corridor_loop(), small_spec, np.random.default_rng(7), seed=7)


@pytest.fixture
def tiny_config() -> RunConfig:
    return RunConfig(
        dim=2,
        seed=3,
        train=TrainConfig(iters=3, eval_every=1, occupancy_beams=8, s_per_beam=2),
    )


def make_sequence(rng: np.random.Generator, frames: int = 3, points: int = 24, dim: int = 2) -> SequenceDataset:
    """Random local scans with random ground-truth poses."""
    rot = 1 if dim == 2 else 3
    gt = [Pose(rng.normal(scale=3.0, size=dim), rng.normal(scale=0.2, size=rot)) for _ in range(frames)]
    clouds = [PointSet(rng.uniform(-20.0, 20.0, size=(points, dim))) for _ in range(frames)]
    return SequenceDataset(dim=dim, frames=clouds, gt_poses=gt, env_name="random")


@pytest.fixture
def sequence_factory():
    return make_sequence
