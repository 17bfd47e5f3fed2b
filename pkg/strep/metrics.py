"""Trajectory evaluation: gauge alignment, ATE and point-wise registration distance.

Every loss is invariant to one rigid motion applied to all poses, so estimated
trajectories are aligned to ground truth before they are compared.
"""

import csv
import io
from typing import ClassVar, Literal, Sequence

import numpy as np
from pydantic import BaseModel, Field

from strep.errors import UsageError
from strep.geometry import PointSet, Pose, compose, inverse

AnchorMode = Literal["fit", "first"]

# positions closer than this to their centroid are treated as a single point
DEGENERATE_SPREAD = 1e-12


class EvalReport(BaseModel):
    ate: float = Field(ge=0, description="RMS translation error after alignment (world units)")
    point_dist: float = Field(ge=0, description="Mean unsquared point distance after alignment")
    point_dist_sq: float = Field(ge=0, description="Sum of squared point distances (index-matched form)")
    per_frame_errors: list[float] = Field(description="Translation error of each aligned frame")
    alignment: list[float] = Field(description="Flat parameters of the aligning pose")
    anchor: AnchorMode = "fit"

    CSV_FIELDS: ClassVar[tuple[str, ...]] = ("ate", "point_dist", "point_dist_sq", "anchor", "num_frames")

    def csv_row(self) -> dict[str, object]:
        return {
            "ate": repr(self.ate),
            "point_dist": repr(self.point_dist),
            "point_dist_sq": repr(self.point_dist_sq),
            "anchor": self.anchor,
            "num_frames": len(self.per_frame_errors),
        }

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=list(self.CSV_FIELDS), lineterminator="\n")
        writer.writeheader()
        writer.writerow(self.csv_row())
        return buffer.getvalue()


def _check_lengths(est: Sequence[Pose], gt: Sequence[Pose]) -> None:
    if len(est) != len(gt):
        raise UsageError(f"{len(est)} estimated poses against {len(gt)} ground-truth poses")
    if not est:
        raise UsageError("trajectories are empty")
    if est[0].dim != gt[0].dim:
        raise UsageError(f"{est[0].dim}D estimate against {gt[0].dim}D ground truth")


def align_trajectories(est: Sequence[Pose], gt: Sequence[Pose], anchor: AnchorMode = "fit") -> Pose:
    """Rigid transform A such that compose(A, est_i) best matches gt_i.

    `fit` is the least-squares rotation+translation between the position sets
    (cross-covariance SVD, no scale); `first` maps the first estimated pose onto
    the first ground-truth pose exactly.
    """
    _check_lengths(est, gt)
    if anchor == "first":
        return compose(gt[0], inverse(est[0]))
    if anchor != "fit":
        raise UsageError(f"unknown anchor mode '{anchor}'")

    src = np.stack([p.translation for p in est])
    dst = np.stack([p.translation for p in gt])
    src_mean, dst_mean = src.mean(axis=0), dst.mean(axis=0)
    src_c, dst_c = src - src_mean, dst - dst_mean
    dim = src.shape[1]
    if np.max(np.abs(src_c), initial=0.0) <= DEGENERATE_SPREAD or np.max(np.abs(dst_c), initial=0.0) <= DEGENERATE_SPREAD:
        return Pose(dst_mean - src_mean, np.zeros(3 if dim == 3 else 1))

    u, _, vt = np.linalg.svd(src_c.T @ dst_c)
    correction = np.eye(dim)
    correction[-1, -1] = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ correction @ u.T
    return Pose.from_matrix(rot, dst_mean - rot @ src_mean)


def aligned_poses(est: Sequence[Pose], gt: Sequence[Pose], anchor: AnchorMode = "fit") -> tuple[Pose, list[Pose]]:
    alignment = align_trajectories(est, gt, anchor)
    return alignment, [compose(alignment, pose) for pose in est]


def ate(est: Sequence[Pose], gt: Sequence[Pose], anchor: AnchorMode = "fit") -> float:
    _, moved = aligned_poses(est, gt, anchor)
    errors = np.array([np.sum((m.translation - g.translation) ** 2) for m, g in zip(moved, gt)])
    return float(np.sqrt(errors.mean()))


def _point_errors(moved: Sequence[Pose], gt: Sequence[Pose], frames: Sequence[PointSet]) -> np.ndarray:
    if len(frames) != len(gt):
        raise UsageError(f"{len(frames)} frames for {len(gt)} poses")
    errors = [
        np.linalg.norm(m.transform(frame.points) - g.transform(frame.points), axis=1)
        for m, g, frame in zip(moved, gt, frames)
    ]
    return np.concatenate(errors)


def point_distance(
    est_poses: Sequence[Pose], gt_poses: Sequence[Pose], frames: Sequence[PointSet], anchor: AnchorMode = "fit"
) -> float:
    """Mean over all points of |aligned est_i(x) - gt_i(x)|, matching each point with itself."""
    _check_lengths(est_poses, gt_poses)
    _, moved = aligned_poses(est_poses, gt_poses, anchor)
    return float(_point_errors(moved, gt_poses, frames).mean())


def evaluate(
    est_poses: Sequence[Pose], gt_poses: Sequence[Pose], frames: Sequence[PointSet], anchor: AnchorMode = "fit"
) -> EvalReport:
    _check_lengths(est_poses, gt_poses)
    alignment, moved = aligned_poses(est_poses, gt_poses, anchor)
    per_frame = [float(np.linalg.norm(m.translation - g.translation)) for m, g in zip(moved, gt_poses)]
    point_errors = _point_errors(moved, gt_poses, frames)
    return EvalReport(
        ate=float(np.sqrt(np.mean(np.square(per_frame)))),
        point_dist=float(point_errors.mean()),
        point_dist_sq=float(np.sum(point_errors**2)),
        per_frame_errors=per_frame,
        alignment=[float(v) for v in alignment.params],
        anchor=anchor,
    )
