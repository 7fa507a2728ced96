"""Pinhole camera model: calibration, unprojection, projection.

Conventions: pixel u runs along columns (x), v along rows (y); camera
looks down +z, so stored depth is the z-coordinate in camera space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraCalib:
    """Intrinsics K (zero skew) and a rigid cam-to-world transform."""

    intrinsics: np.ndarray
    cam_to_world: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64)
        t = np.asarray(self.cam_to_world, dtype=np.float64)
        if k.shape != (3, 3) or t.shape != (4, 4):
            raise ValueError("intrinsics must be 3x3 and cam_to_world 4x4")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(k[0, 1]) > 0 or abs(k[1, 0]) > 0 or abs(k[2, 0]) > 0 or abs(k[2, 1]) > 0:
            raise ValueError("intrinsics must have zero skew")
        r = t[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation must be proper (det +1)")
        if not np.allclose(t[3], [0, 0, 0, 1]):
            raise ValueError("last row of cam_to_world must be [0,0,0,1]")
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "cam_to_world", t)

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def position(self) -> np.ndarray:
        return self.cam_to_world[:3, 3].copy()


def make_intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]], dtype=np.float64)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """cam_to_world for a camera at `position` looking at `target`.

    Camera axes: +z forward, +x right, +y down (image rows grow downward).
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with target")
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise ValueError("up direction parallel to viewing direction")
    right /= rnorm
    down = np.cross(forward, right)
    t = np.eye(4)
    t[:3, 0] = right
    t[:3, 1] = down
    t[:3, 2] = forward
    t[:3, 3] = position
    return t


def unproject(u, v, d, calib: CameraCalib) -> np.ndarray:
    """World point of pixel (u, v) at camera-space depth d.

    Accepts scalars or equally shaped arrays; returns (..., 3).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    x = (u - calib.cx) / calib.fx * d
    y = (v - calib.cy) / calib.fy * d
    cam = np.stack([x, y, d], axis=-1)
    r = calib.cam_to_world[:3, :3]
    t = calib.cam_to_world[:3, 3]
    return cam @ r.T + t


def project(points, calib: CameraCalib):
    """Pixel coordinates and camera-space depth of world points (..., 3)."""
    points = np.asarray(points, dtype=np.float64)
    r = calib.cam_to_world[:3, :3]
    t = calib.cam_to_world[:3, 3]
    cam = (points - t) @ r
    z = cam[..., 2]
    u = calib.fx * cam[..., 0] / z + calib.cx
    v = calib.fy * cam[..., 1] / z + calib.cy
    return u, v, z
