"""Pinhole cameras, ray generation, and the forward-facing NDC warp.

Conventions: right-handed world, camera looks down its -z axis, +x right,
+y up, image origin at the top-left.  Pixel coordinate (x, y) maps to the
camera-space direction ((x - cx) / fx, -(y - cy) / fy, -1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray  # 3x4 camera-to-world
    near: float = 0.05
    far: float = 1e3

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape == (4, 4):
            self.c2w = self.c2w[:3]
        if self.c2w.shape != (3, 4):
            raise InvalidParameterError(f"c2w must be 3x4, got {self.c2w.shape}")
        r = self.c2w[:, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise InvalidParameterError("rotation part is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal length must be positive")
        if not self.near < self.far:
            raise InvalidParameterError("require near < far")

    @classmethod
    def from_fov(cls, width, height, fov_x, c2w, near=0.05, far=1e3):
        """Camera with square pixels from a horizontal field of view (radians)."""
        focal = 0.5 * width / np.tan(0.5 * fov_x)
        return cls(width, height, focal, focal, 0.5 * width, 0.5 * height,
                   c2w, near, far)

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:, :3]

    def pixel_grid(self) -> np.ndarray:
        """All integer pixel coordinates, shape (H*W, 2), row-major."""
        xs, ys = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


@dataclass
class RayBatch:
    """A batch of rays sharing near/far planes."""

    origins: np.ndarray     # (R, 3)
    directions: np.ndarray  # (R, 3)
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        if self.origins.shape != self.directions.shape:
            raise InvalidParameterError("origins/directions shape mismatch")
        if not self.t_near < self.t_far:
            raise InvalidParameterError("require t_near < t_far")

    def __len__(self):
        return self.origins.shape[0]


def generate_rays(camera: Camera, pixels: np.ndarray) -> RayBatch:
    """Rays through the given (x, y) pixel coordinates (fractional allowed)."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    if pixels.shape[1] != 2:
        raise InvalidParameterError(f"pixels must be (K, 2), got {pixels.shape}")
    if np.any(pixels[:, 0] < 0) or np.any(pixels[:, 0] > camera.width - 1) \
            or np.any(pixels[:, 1] < 0) or np.any(pixels[:, 1] > camera.height - 1):
        raise InvalidParameterError("pixel coordinates out of image bounds")
    dirs_cam = np.stack([
        (pixels[:, 0] - camera.cx) / camera.fx,
        -(pixels[:, 1] - camera.cy) / camera.fy,
        -np.ones(len(pixels)),
    ], axis=1)
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.origin, dirs.shape).copy()
    return RayBatch(origins, dirs, camera.near, camera.far)


def ndc_points(points: np.ndarray, camera: Camera) -> np.ndarray:
    """Map world-frame points with z < -near to the NDC cube.

    z = -near maps to ndc z = -1 and z -> -inf maps to ndc z -> 1.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    z = points[:, 2]
    if np.any(z > -camera.near):
        raise InvalidParameterError("points must lie beyond the near plane")
    return np.stack([
        -camera.fx / (0.5 * camera.width) * points[:, 0] / z,
        -camera.fy / (0.5 * camera.height) * points[:, 1] / z,
        1.0 + 2.0 * camera.near / z,
    ], axis=1)


def ndc_points_inverse(ndc: np.ndarray, camera: Camera) -> np.ndarray:
    """Inverse of :func:`ndc_points` on its domain (ndc z < 1)."""
    ndc = np.atleast_2d(np.asarray(ndc, dtype=np.float64))
    z = 2.0 * camera.near / (ndc[:, 2] - 1.0)
    return np.stack([
        -ndc[:, 0] * z * (0.5 * camera.width) / camera.fx,
        -ndc[:, 1] * z * (0.5 * camera.height) / camera.fy,
        z,
    ], axis=1)


def ndc_warp(rays: RayBatch, camera: Camera) -> RayBatch:
    """Standard forward-facing NDC reparameterization of camera rays.

    Ray origins are first advanced to the near plane; the returned rays
    sweep the NDC cube for t in [0, 1).  Directions are not unit length.
    """
    o, d = rays.origins, rays.directions
    if np.any(np.abs(d[:, 2]) < 1e-12):
        raise InvalidParameterError("rays parallel to the image plane cannot be warped")
    t = -(camera.near + o[:, 2]) / d[:, 2]
    if np.any(t < -1e-9):
        raise InvalidParameterError("ray origin is behind the near plane")
    o = o + t[:, None] * d

    w2 = 0.5 * camera.width
    h2 = 0.5 * camera.height
    ox = -camera.fx / w2 * o[:, 0] / o[:, 2]
    oy = -camera.fy / h2 * o[:, 1] / o[:, 2]
    oz = 1.0 + 2.0 * camera.near / o[:, 2]
    dx = -camera.fx / w2 * (d[:, 0] / d[:, 2] - o[:, 0] / o[:, 2])
    dy = -camera.fy / h2 * (d[:, 1] / d[:, 2] - o[:, 1] / o[:, 2])
    dz = -2.0 * camera.near / o[:, 2]
    origins = np.stack([ox, oy, oz], axis=1)
    directions = np.stack([dx, dy, dz], axis=1)
    return RayBatch(origins, directions, 0.0, 1.0)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """3x4 camera-to-world with -z pointing from position toward target."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-8:  # looking straight along the up axis
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        nrm = np.linalg.norm(right)
    right /= nrm
    true_up = np.cross(right, forward)
    return np.stack([right, true_up, -forward, position], axis=1)
