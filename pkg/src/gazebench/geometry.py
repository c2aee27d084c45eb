"""Pinhole camera math and the cross-view gaze mapping.

Camera frame convention: x right, y down, z forward along the optical axis.
Poses map world coordinates into the camera frame, ``p = R @ x + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, ConfigInvalid

EPS_DEPTH = 1e-6
ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigInvalid("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigInvalid("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not is_rotation(r, ORTHO_TOL):
            raise ConfigInvalid("pose rotation is not a proper rotation")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) into this camera's frame."""
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse_apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class PixelPoint:
    x: float
    y: float
    in_bounds: bool


def is_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(r) - 1.0) <= tol


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_from_yaw_pitch_roll(yaw: float, pitch: float, roll: float = 0.0) -> np.ndarray:
    """Camera-to-world rotation for a camera turned by yaw (about +y, looking
    right is positive) then pitched (about +x, looking down is positive).

    The world-to-camera rotation of a pose is the transpose.
    """
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    # y points down, so a downward pitch rotates +z towards +y
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
    rz = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]])
    return ry @ rx @ rz


def pose_looking(center, yaw: float, pitch: float, roll: float = 0.0) -> Pose:
    """Pose of a camera at ``center`` (world) oriented by yaw/pitch/roll."""
    c2w = rotation_from_yaw_pitch_roll(yaw, pitch, roll)
    rot = orthonormalize(c2w.T)
    return Pose(rot, -rot @ np.asarray(center, dtype=np.float64))


def in_image(x: float, y: float, intr: Intrinsics) -> bool:
    return bool(0.0 <= x < intr.width and 0.0 <= y < intr.height)


def project(point, intr: Intrinsics, pose: Pose) -> tuple[PixelPoint, float]:
    """Project one world point; returns the pixel and its camera-frame depth."""
    p = pose.apply(np.asarray(point, dtype=np.float64))
    z = float(p[2])
    if z <= EPS_DEPTH:
        raise BehindCamera(f"point at depth {z:.3g} m is behind the camera")
    x = intr.fx * p[0] / z + intr.cx
    y = intr.fy * p[1] / z + intr.cy
    return PixelPoint(float(x), float(y), in_image(x, y, intr)), z


def project_many(points: np.ndarray, intr: Intrinsics, pose: Pose):
    """Vectorised projection. Returns (xy (N,2), depth (N,), valid (N,)).

    Points behind the camera have ``valid`` False and NaN pixel coordinates.
    """
    p = pose.apply(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = p[:, 2]
    valid = z > EPS_DEPTH
    safe = np.where(valid, z, 1.0)
    xy = np.stack(
        [intr.fx * p[:, 0] / safe + intr.cx, intr.fy * p[:, 1] / safe + intr.cy], axis=1
    )
    xy[~valid] = np.nan
    return xy, z, valid


def back_project(pixel: PixelPoint, depth: float, intr: Intrinsics, pose: Pose) -> np.ndarray:
    """World point seen at ``pixel`` with camera-frame depth ``depth``."""
    if depth <= EPS_DEPTH:
        raise BehindCamera("back-projection depth must be positive")
    p = np.array(
        [(pixel.x - intr.cx) / intr.fx * depth, (pixel.y - intr.cy) / intr.fy * depth, depth]
    )
    return pose.inverse_apply(p)


def relative_extrinsics(head: Pose, neck: Pose) -> Pose:
    """Transform taking head-camera coordinates to neck-camera coordinates."""
    r_rel = neck.rotation @ head.rotation.T
    t_rel = neck.translation - r_rel @ head.translation
    return Pose(r_rel, t_rel)


def map_gaze_cross_view(
    gaze: PixelPoint,
    depth: float,
    head: tuple[Intrinsics, Pose],
    neck: tuple[Intrinsics, Pose],
) -> PixelPoint:
    """Carry a head-view gaze pixel at known depth into the neck view.

    Out-of-frame results are returned with ``in_bounds=False``; only a target
    behind the neck camera raises :class:`BehindCamera`.
    """
    head_intr, head_pose = head
    neck_intr, neck_pose = neck
    if not gaze.in_bounds:
        raise ValueError("gaze must lie inside the head image")
    world = back_project(gaze, depth, head_intr, head_pose)
    pixel, _ = project(world, neck_intr, neck_pose)
    return pixel
