"""SVG figures: estimated vs ground-truth trajectory and the stacked global scene.

3D inputs are drawn as their x-y projection.
"""

import io
import logging
from pathlib import Path
from typing import Optional, Sequence

import matplotlib
from matplotlib.figure import Figure

from strep.errors import StrepIOError, UsageError
from strep.geometry import PointSet, Pose, build_scene
from strep.metrics import AnchorMode, aligned_poses

logger = logging.getLogger(__name__)

# fixed salt so element ids, and with them the SVG bytes, repeat across runs
_SVG_RC = {"svg.hashsalt": "strep", "svg.fonttype": "none"}


def _trajectory_axes(ax, est: Sequence[Pose], gt: Optional[Sequence[Pose]]) -> None:
    if gt is not None:
        xs, ys = zip(*(p.translation[:2] for p in gt))
        ax.plot(xs, ys, marker="o", markersize=3, linestyle="-", color="black", label="ground truth")
    xs, ys = zip(*(p.translation[:2] for p in est))
    ax.plot(xs, ys, marker=".", markersize=3, linestyle="--", color="tab:red", label="estimate")
    ax.set_title("Trajectory")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(True)
    ax.legend(loc="best")


def _scene_axes(ax, poses: Sequence[Pose], frames: Sequence[PointSet]) -> None:
    scene = build_scene(poses, frames)
    colours = matplotlib.colormaps["viridis"].resampled(max(len(scene), 2))
    for i, (frame, origin) in enumerate(zip(scene.frames, scene.origins)):
        ax.scatter(frame.points[:, 0], frame.points[:, 1], s=1.5, color=colours(i), linewidths=0)
        ax.plot([origin[0]], [origin[1]], marker="^", markersize=4, color=colours(i))
    ax.set_title(f"Registered scene ({len(scene)} frames)")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_aspect("equal", adjustable="datalim")


def render_registration(
    est_poses: Sequence[Pose],
    frames: Sequence[PointSet],
    gt_poses: Optional[Sequence[Pose]] = None,
    anchor: AnchorMode = "fit",
    title: Optional[str] = None,
) -> bytes:
    """SVG bytes of the trajectory overlay (left) and the scene stacked with the estimate (right)."""
    if len(est_poses) != len(frames):
        raise UsageError(f"{len(est_poses)} poses for {len(frames)} frames")
    if not frames:
        raise UsageError("nothing to plot")
    est = list(est_poses)
    if gt_poses is not None:
        _, est = aligned_poses(est, gt_poses, anchor)

    with matplotlib.rc_context(_SVG_RC):
        fig = Figure(figsize=(12, 6))
        left, right = fig.subplots(1, 2)
        _trajectory_axes(left, est, gt_poses)
        _scene_axes(right, est, frames)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        buffer = io.BytesIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue()


def plot_registration(path: str | Path, *args, **kwargs) -> Path:
    target = Path(path)
    svg = render_registration(*args, **kwargs)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(svg)
    except OSError as e:
        raise StrepIOError(f"cannot write {target}: {e}")
    logger.info(f"wrote {target}")
    return target
