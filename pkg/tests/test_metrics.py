import numpy as np
import pytest

from strep.errors import UsageError
from strep.geometry import PointSet, Pose, compose
from strep.metrics import EvalReport, align_trajectories, ate, evaluate, point_distance


def _trajectory(rng, dim, count=6):
    rot = 1 if dim == 2 else 3
    return [Pose(rng.normal(scale=10.0, size=dim), rng.normal(scale=0.5, size=rot)) for _ in range(count)]


def _frames(rng, dim, count=6):
    return [PointSet(rng.normal(scale=5.0, size=(12, dim))) for _ in range(count)]


def test_perfect_estimate_scores_zero(rng):
    gt = _trajectory(rng, 2)
    report = evaluate(gt, gt, _frames(rng, 2))
    assert report.ate == pytest.approx(0.0, abs=1e-9)
    assert report.point_dist == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("anchor", ["fit", "first"])
def test_metrics_ignore_a_global_rigid_motion(dim, anchor):
    rng = np.random.default_rng(40 + dim)
    for _ in range(20):
        gt = _trajectory(rng, dim)
        frames = _frames(rng, dim)
        gauge = _trajectory(rng, dim, count=1)[0]
        est = [compose(gauge, pose) for pose in gt]
        assert ate(est, gt, anchor) == pytest.approx(0.0, abs=1e-8)
        assert point_distance(est, gt, frames, anchor) == pytest.approx(0.0, abs=1e-8)


@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("anchor", ["fit", "first"])
def test_ate_of_a_noisy_estimate_ignores_a_common_rigid_motion(dim, anchor):
    rng = np.random.default_rng(60 + dim)
    rot = 1 if dim == 2 else 3
    for _ in range(20):
        gt = _trajectory(rng, dim)
        est = [
            Pose(p.translation + rng.normal(scale=2.0, size=dim), p.rotation + rng.normal(scale=0.05, size=rot))
            for p in gt
        ]
        gauge = Pose(rng.normal(scale=10.0, size=dim), rng.normal(scale=0.3, size=rot))
        moved = [compose(gauge, pose) for pose in est]
        assert ate(est, gt, anchor) > 0.1
        assert abs(ate(moved, gt, anchor) - ate(est, gt, anchor)) < 1e-9


def test_alignment_recovers_the_gauge(rng):
    gt = _trajectory(rng, 3)
    gauge = Pose([1.0, -2.0, 0.5], [0.3, -0.2, 0.1])
    est = [compose(gauge, pose) for pose in gt]
    alignment = align_trajectories(est, gt)
    np.testing.assert_allclose(compose(alignment, gauge).matrix(), np.eye(3), atol=1e-9)


def test_single_frame_error_with_first_anchor():
    gt = [Pose([0.0, 0.0], [0.0]), Pose([5.0, 0.0], [0.0]), Pose([10.0, 0.0], [0.0])]
    est = gt[:2] + [Pose([11.0, 0.0], [0.0])]
    frames = [PointSet(np.ones((4, 2))) for _ in gt]
    report = evaluate(est, gt, frames, anchor="first")
    assert report.per_frame_errors == pytest.approx([0.0, 0.0, 1.0])
    assert report.ate == pytest.approx(np.sqrt(1.0 / 3.0))
    assert report.point_dist == pytest.approx(1.0 / 3.0)
    assert report.point_dist_sq == pytest.approx(4.0)


def test_degenerate_trajectory_aligns_by_translation():
    gt = [Pose([1.0, 1.0], [0.0])] * 3
    est = [Pose([4.0, 5.0], [0.2])] * 3
    alignment = align_trajectories(est, gt)
    np.testing.assert_allclose(alignment.translation, [-3.0, -4.0])
    assert ate(est, gt) == pytest.approx(0.0)


def test_length_mismatch_is_rejected(rng):
    gt = _trajectory(rng, 2)
    with pytest.raises(UsageError):
        ate(gt[:3], gt)
    with pytest.raises(UsageError):
        point_distance(gt, gt, _frames(rng, 2, count=2))
    with pytest.raises(UsageError):
        align_trajectories(gt, gt, anchor="median")


def test_report_csv(rng):
    gt = _trajectory(rng, 2)
    report = evaluate(gt, gt, _frames(rng, 2))
    header, row = report.to_csv().splitlines()
    assert header == ",".join(EvalReport.CSV_FIELDS)
    assert row.endswith(",fit,6")


def _ring(count=16, radius=60.0):
    angles = np.arange(count) * 2.0 * np.pi / count
    return [Pose(radius * np.array([np.cos(a), np.sin(a)]), [a + np.pi / 2]) for a in angles]


def test_one_frame_off_by_four_pixels_with_fit_alignment():
    gt = _ring()
    est = list(gt)
    est[5] = Pose(gt[5].translation + [4.0, 0.0], gt[5].rotation)
    # the unaligned error is 4 / sqrt(16); alignment can only shave a little off it
    assert 0.8 < ate(est, gt, "fit") < 1.05


def test_first_anchor_with_a_moved_first_pose():
    gt = _ring()
    gauge = Pose([10.0, -5.0], [0.7])
    est = [compose(gauge, pose) for pose in gt]
    est[5] = compose(gauge, Pose(gt[5].translation + [4.0, 0.0], gt[5].rotation))
    frames = [PointSet(np.zeros((1, 2))) for _ in gt]
    report = evaluate(est, gt, frames, anchor="first")
    assert report.ate == pytest.approx(1.0, rel=1e-9)
    expected = [0.0] * 16
    expected[5] = 4.0
    assert report.per_frame_errors == pytest.approx(expected, abs=1e-9)
    assert report.point_dist == pytest.approx(4.0 / 16.0, rel=1e-9)
