"""Analytic ray casting of planes and axis-aligned boxes.

World frame: +X right, +Y up, +Z away from the camera; the floor is ``y = 0``.
The camera sits at ``(0, height, 0)`` looking along +Z, pitched down by
``pitch_deg``, with no roll or yaw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..hha import CameraModel

FLOOR, BACK_WALL, LEFT_WALL, RIGHT_WALL = 0, 1, 2, 3
BOX_BASE = 10  # label of box i is BOX_BASE + i
NO_HIT = -1


@dataclass(frozen=True)
class CameraPose:
    height: float
    pitch_deg: float

    def rotation(self) -> np.ndarray:
        """Columns are the camera x (right), y (down), z (forward) axes in world coordinates."""
        t = math.radians(self.pitch_deg)
        x = np.array([1.0, 0.0, 0.0])
        y = np.array([0.0, -math.cos(t), -math.sin(t)])
        z = np.array([0.0, -math.sin(t), math.cos(t)])
        return np.stack([x, y, z], axis=1)

    @property
    def origin(self) -> np.ndarray:
        return np.array([0.0, self.height, 0.0])

    def gravity_camera(self) -> np.ndarray:
        """Unit down vector expressed in camera coordinates."""
        return self.rotation().T @ np.array([0.0, -1.0, 0.0])

    def to_camera(self, pts_world: np.ndarray) -> np.ndarray:
        """``[..., 3]`` world points to camera coordinates."""
        return (pts_world - self.origin) @ self.rotation()


@dataclass(frozen=True)
class Box3D:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    @property
    def center(self) -> np.ndarray:
        return (np.array(self.lo) + np.array(self.hi)) / 2

    @property
    def top(self) -> float:
        return self.hi[1]

    @property
    def bottom(self) -> float:
        return self.lo[1]

    def corners(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


@dataclass(frozen=True)
class Room:
    back_z: float | None = 8.0
    left_x: float | None = None
    right_x: float | None = None


@dataclass
class Render:
    depth: np.ndarray  # [H, W] along the optical axis
    label: np.ndarray  # [H, W] int
    normal_world: np.ndarray  # [3, H, W]


def pixel_rays(cam: CameraModel, pose: CameraPose, width: int, height: int) -> np.ndarray:
    """World-frame ray directions ``[H*W, 3]`` scaled so that the camera-z component is 1."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    d_cam = np.stack([(u - cam.cx) / cam.focal_px, (v - cam.cy) / cam.focal_px, np.ones_like(u)], -1).reshape(-1, 3)
    return d_cam @ pose.rotation().T


def render(cam: CameraModel, pose: CameraPose, width: int, height: int, boxes: list[Box3D], room: Room = Room()) -> Render:
    o = pose.origin
    d = pixel_rays(cam, pose, width, height)
    n = d.shape[0]
    best_t = np.full(n, np.inf)
    label = np.full(n, NO_HIT, dtype=np.int64)
    normal = np.zeros((n, 3))

    def plane(axis: int, value: float, nrm, lab: int):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (value - o[axis]) / d[:, axis]
        hit = np.isfinite(t) & (t > 1e-9) & (t < best_t)
        best_t[hit] = t[hit]
        label[hit] = lab
        normal[hit] = nrm

    plane(1, 0.0, (0.0, 1.0, 0.0), FLOOR)
    if room.back_z is not None:
        plane(2, room.back_z, (0.0, 0.0, -1.0), BACK_WALL)
    if room.left_x is not None:
        plane(0, room.left_x, (1.0, 0.0, 0.0), LEFT_WALL)
    if room.right_x is not None:
        plane(0, room.right_x, (-1.0, 0.0, 0.0), RIGHT_WALL)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    for i, b in enumerate(boxes):
        t1 = (np.array(b.lo) - o) * inv
        t2 = (np.array(b.hi) - o) * inv
        tmin = np.fmin(t1, t2)
        tmax = np.fmax(t1, t2)
        tnear = np.max(tmin, axis=1)
        tfar = np.min(tmax, axis=1)
        hit = (tnear <= tfar) & (tnear > 1e-9) & (tnear < best_t)
        if not hit.any():
            continue
        axis = np.argmax(tmin[hit], axis=1)
        nrm = np.zeros((int(hit.sum()), 3))
        nrm[np.arange(len(axis)), axis] = -np.sign(d[hit, axis])
        best_t[hit] = tnear[hit]
        label[hit] = BOX_BASE + i
        normal[hit] = nrm

    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return Render(depth.reshape(height, width), label.reshape(height, width), normal.T.reshape(3, height, width))
