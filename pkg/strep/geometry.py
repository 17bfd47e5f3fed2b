"""Rigid poses in SE(2)/SE(3), point-set containers and the aligned global scene.

2D rotations are one angle; 3D rotations are Z-Y-X intrinsic Euler angles
(yaw about Z, then pitch about Y, then roll about X), so R = Rz(yaw) Ry(pitch) Rx(roll).
Angles stay unwrapped everywhere except `wrap_angles`, used when reporting.
"""

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from strep.errors import UsageError

ROTATION_PARAMS = {2: 1, 3: 3}


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


def _check_dim(dim: int) -> None:
    if dim not in ROTATION_PARAMS:
        raise UsageError(f"dimension must be 2 or 3, got {dim}")


def wrap_angles(angles: np.ndarray) -> np.ndarray:
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(angles, dtype=np.float64), 2 * np.pi)


def rotation_matrix(angles: np.ndarray) -> np.ndarray:
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape == (1,):
        c, s = np.cos(angles[0]), np.sin(angles[0])
        return np.array([[c, -s], [s, c]])
    if angles.shape == (3,):
        return _rz(angles[0]) @ _ry(angles[1]) @ _rx(angles[2])
    raise UsageError(f"expected 1 or 3 rotation parameters, got shape {angles.shape}")


def rotation_jacobian(angles: np.ndarray) -> list[np.ndarray]:
    """d R / d angle_i for every rotation parameter."""
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape == (1,):
        c, s = np.cos(angles[0]), np.sin(angles[0])
        return [np.array([[-s, -c], [c, -s]])]
    if angles.shape == (3,):
        yaw, pitch, roll = angles
        rz, ry, rx = _rz(yaw), _ry(pitch), _rx(roll)
        return [
            _drz(yaw) @ ry @ rx,
            rz @ _dry(pitch) @ rx,
            rz @ ry @ _drx(roll),
        ]
    raise UsageError(f"expected 1 or 3 rotation parameters, got shape {angles.shape}")


def angles_from_matrix(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape == (2, 2):
        return np.array([np.arctan2(rot[1, 0], rot[0, 0])])
    if rot.shape == (3, 3):
        sin_pitch = -np.clip(rot[2, 0], -1.0, 1.0)
        pitch = np.arcsin(sin_pitch)
        if abs(sin_pitch) > 1.0 - 1e-12:
            # gimbal lock: yaw and roll are coupled, put everything in yaw
            return np.array([np.arctan2(-rot[0, 1], rot[1, 1]), pitch, 0.0])
        yaw = np.arctan2(rot[1, 0], rot[0, 0])
        roll = np.arctan2(rot[2, 1], rot[2, 2])
        return np.array([yaw, pitch, roll])
    raise UsageError(f"expected a 2x2 or 3x3 rotation, got shape {rot.shape}")


def _rz(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rx(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _drz(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def _dry(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drx(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


@dataclass(frozen=True)
class Pose:
    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        translation = _frozen(self.translation).reshape(-1)
        rotation = _frozen(self.rotation).reshape(-1)
        _check_dim(translation.shape[0])
        if rotation.shape[0] != ROTATION_PARAMS[translation.shape[0]]:
            raise UsageError(
                f"{translation.shape[0]}D pose needs {ROTATION_PARAMS[translation.shape[0]]} "
                f"rotation parameters, got {rotation.shape[0]}"
            )
        if not (np.all(np.isfinite(translation)) and np.all(np.isfinite(rotation))):
            raise UsageError("pose parameters must be finite")
        translation.setflags(write=False)
        rotation.setflags(write=False)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "rotation", rotation)

    @property
    def dim(self) -> int:
        return int(self.translation.shape[0])

    @classmethod
    def identity(cls, dim: int) -> "Pose":
        _check_dim(dim)
        return cls(np.zeros(dim), np.zeros(ROTATION_PARAMS[dim]))

    @classmethod
    def from_params(cls, params: Sequence[float], dim: int) -> "Pose":
        """Build from the flat layout [translation..., rotation...] (3 numbers in 2D, 6 in 3D)."""
        _check_dim(dim)
        params = np.asarray(params, dtype=np.float64).reshape(-1)
        if params.shape[0] != dim + ROTATION_PARAMS[dim]:
            raise UsageError(f"{dim}D pose needs {dim + ROTATION_PARAMS[dim]} parameters, got {params.shape[0]}")
        return cls(params[:dim], params[dim:])

    @classmethod
    def from_matrix(cls, rot: np.ndarray, translation: np.ndarray) -> "Pose":
        return cls(translation, angles_from_matrix(rot))

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation])

    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.rotation)

    def wrapped(self) -> "Pose":
        return Pose(self.translation, wrap_angles(self.rotation))

    def transform(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape[-1] != self.dim:
            raise UsageError(f"cannot apply a {self.dim}D pose to {coords.shape[-1]}D coordinates")
        return coords @ self.matrix().T + self.translation


@dataclass(frozen=True)
class PointSet:
    points: np.ndarray
    sensor_origin: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2:
            raise UsageError(f"points must be an (n, dim) array, got shape {points.shape}")
        _check_dim(points.shape[1])
        if points.shape[0] < 1:
            raise UsageError("a point set needs at least one point")
        if not np.all(np.isfinite(points)):
            raise UsageError("point coordinates must be finite")
        if self.sensor_origin is None:
            origin = np.zeros(points.shape[1])
        else:
            origin = np.array(self.sensor_origin, dtype=np.float64).reshape(-1)
        if origin.shape != (points.shape[1],) or not np.all(np.isfinite(origin)):
            raise UsageError("sensor_origin must be a finite vector of the point dimension")
        points.setflags(write=False)
        origin.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "sensor_origin", origin)

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    def __len__(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class GlobalScene:
    frames: tuple[PointSet, ...]
    origins: tuple[np.ndarray, ...]

    @property
    def dim(self) -> int:
        return self.frames[0].dim

    def __len__(self) -> int:
        return len(self.frames)

    def stacked(self) -> np.ndarray:
        """All aligned frames stacked into one point array (the global scene)."""
        return np.concatenate([frame.points for frame in self.frames], axis=0)


def apply_pose(pose: Pose, pts: PointSet) -> PointSet:
    if pose.dim != pts.dim:
        raise UsageError(f"pose is {pose.dim}D but points are {pts.dim}D")
    return PointSet(pose.transform(pts.points), pose.transform(pts.sensor_origin))


def compose(a: Pose, b: Pose) -> Pose:
    """apply_pose(compose(a, b), x) == apply_pose(a, apply_pose(b, x))."""
    if a.dim != b.dim:
        raise UsageError(f"cannot compose a {a.dim}D pose with a {b.dim}D pose")
    ra = a.matrix()
    translation = ra @ b.translation + a.translation
    if a.dim == 2:
        return Pose(translation, a.rotation + b.rotation)
    return Pose.from_matrix(ra @ b.matrix(), translation)


def inverse(p: Pose) -> Pose:
    rot_t = p.matrix().T
    translation = -(rot_t @ p.translation)
    if p.dim == 2:
        return Pose(translation, -p.rotation)
    return Pose.from_matrix(rot_t, translation)


def build_scene(poses: Sequence[Pose], frames: Sequence[PointSet]) -> GlobalScene:
    if len(poses) != len(frames):
        raise UsageError(f"{len(poses)} poses for {len(frames)} frames")
    if not frames:
        raise UsageError("a scene needs at least one frame")
    moved = tuple(apply_pose(pose, frame) for pose, frame in zip(poses, frames))
    return GlobalScene(frames=moved, origins=tuple(frame.sensor_origin for frame in moved))
