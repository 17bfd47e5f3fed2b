import numpy as np
import pytest

from strep.datafiles import write_poses
from strep.errors import DatasetFormatError, StrepIOError, UsageError
from strep.loaders import CameraIntrinsics, depth_to_points, load_depth_sequence, load_point_sequence


def _write_xyz(directory, index, points):
    np.savetxt(directory / f"frame_{index:03d}.xyz", points)


def test_point_sequence_is_read_in_numeric_order(tmp_path, rng):
    clouds = [rng.normal(size=(5 + i, 2)) for i in range(3)]
    for i, cloud in enumerate(clouds):
        _write_xyz(tmp_path, i, cloud)
    # a tenth frame must sort after frame 2
    np.savetxt(tmp_path / "frame_10.xyz", rng.normal(size=(4, 2)))
    (tmp_path / "notes.txt").write_text("ignored")
    dataset = load_point_sequence(tmp_path)
    assert [len(f) for f in dataset.frames] == [5, 6, 7, 4]
    np.testing.assert_allclose(dataset.frames[1].points, clouds[1])
    assert dataset.gt_poses is None


def test_point_sequence_with_origins_and_poses(tmp_path, rng, sequence_factory):
    reference = sequence_factory(rng, frames=2, dim=3)
    for i, frame in enumerate(reference.frames):
        _write_xyz(tmp_path, i, frame.points)
    (tmp_path / "origins.csv").write_text("frame,ox,oy,oz\n0,1,2,3\n1,0,0,1\n")
    write_poses(tmp_path / "poses.csv", reference.gt_poses)
    dataset = load_point_sequence(tmp_path)
    assert dataset.dim == 3
    np.testing.assert_array_equal(dataset.frames[0].sensor_origin, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(dataset.gt_poses[1].params, reference.gt_poses[1].params)


def test_pose_count_must_match(tmp_path, rng, sequence_factory):
    reference = sequence_factory(rng, frames=3)
    for i, frame in enumerate(reference.frames[:2]):
        _write_xyz(tmp_path, i, frame.points)
    write_poses(tmp_path / "poses.csv", reference.gt_poses)
    with pytest.raises(DatasetFormatError):
        load_point_sequence(tmp_path)


def test_mixed_dimensions_are_rejected(tmp_path, rng):
    _write_xyz(tmp_path, 0, rng.normal(size=(4, 2)))
    _write_xyz(tmp_path, 1, rng.normal(size=(4, 3)))
    with pytest.raises(DatasetFormatError):
        load_point_sequence(tmp_path)


def test_empty_directory(tmp_path):
    with pytest.raises(StrepIOError):
        load_point_sequence(tmp_path)
    with pytest.raises(StrepIOError):
        load_point_sequence(tmp_path / "missing")


def test_depth_back_projection():
    depth = np.zeros((3, 4))
    depth[1, 2] = 2000.0
    depth[2, 0] = 500.0
    points = depth_to_points(depth, fx=2.0, fy=4.0, cx=1.0, cy=1.0)
    np.testing.assert_allclose(points.points, [[1.0, 0.0, 2.0], [-0.25, 0.125, 0.5]])


def test_depth_stride_and_invalid_pixels():
    depth = np.full((4, 4), 1000.0)
    depth[0, 0] = np.nan
    points = depth_to_points(depth, 1.0, 1.0, 0.0, 0.0, stride=2)
    assert len(points) == 3
    with pytest.raises(UsageError):
        depth_to_points(np.zeros((2, 2)), 1.0, 1.0, 0.0, 0.0)
    with pytest.raises(UsageError):
        depth_to_points(np.ones(4), 1.0, 1.0, 0.0, 0.0)


def test_depth_sequence(tmp_path):
    for i in range(2):
        np.save(tmp_path / f"depth_{i:03d}.npy", np.full((6, 8), 1000.0 * (i + 1)))
    camera = CameraIntrinsics(fx=4.0, fy=4.0, cx=4.0, cy=3.0, stride=2)
    dataset = load_depth_sequence(tmp_path, camera)
    assert dataset.dim == 3
    assert [len(f) for f in dataset.frames] == [12, 12]
    np.testing.assert_allclose(dataset.frames[1].points[:, 2], 2.0)
