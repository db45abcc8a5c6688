"""Dense voxel grids: trilinear sampling, its adjoint, density activation,
resampling, and the expanding-bounding-box training schedule.

Memory layout is channel-major, then x, y, z row-major, i.e. ``values[c, ix, iy, iz]``
with the z index fastest.  Voxel centers sit on a regular lattice that spans the
world-space bounds inclusively: center i along an axis with N samples is at
``bmin + i * (bmax - bmin) / (N - 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import InvalidParameterError

# Offsets of the 8 cell corners, in (x, y, z) index order.
_CORNERS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


@dataclass
class VoxelGrid:
    """Dense C-channel grid over an axis-aligned world-space box.

    values: array of shape (C, Nx, Ny, Nz).
    bounds_min / bounds_max: world-space corners of the box, shape (3,).
    """

    values: np.ndarray
    bounds_min: np.ndarray
    bounds_max: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        if self.values.ndim != 4 or self.values.size == 0:
            raise InvalidParameterError(
                f"grid values must be a non-empty (C, Nx, Ny, Nz) array, got shape "
                f"{self.values.shape}")
        if any(n < 2 for n in self.values.shape[1:]):
            raise InvalidParameterError(
                f"resolution must be >= 2 per axis, got {self.values.shape[1:]}")
        if self.bounds_min.shape != (3,) or self.bounds_max.shape != (3,):
            raise InvalidParameterError("bounds must be 3-vectors")
        if not np.all(self.bounds_min < self.bounds_max):
            raise InvalidParameterError(
                f"bounds_min must be < bounds_max, got {self.bounds_min} / "
                f"{self.bounds_max}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidParameterError("grid values contain NaN/Inf")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def resolution(self) -> tuple:
        return self.values.shape[1:]

    @property
    def voxel_sizes(self) -> np.ndarray:
        """Per-axis spacing between adjacent voxel centers, world units."""
        res = np.array(self.resolution, dtype=np.float64)
        return (self.bounds_max - self.bounds_min) / (res - 1.0)

    @property
    def voxel_size(self) -> float:
        """Scalar voxel size: mean of the per-axis spacings."""
        return float(self.voxel_sizes.mean())

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.values.copy(), self.bounds_min.copy(),
                         self.bounds_max.copy())

    @classmethod
    def zeros(cls, channels, resolution, bounds_min, bounds_max, dtype=np.float64):
        values = np.zeros((channels, *resolution), dtype=dtype)
        return cls(values, bounds_min, bounds_max)

    def world_to_grid(self, points: np.ndarray) -> np.ndarray:
        """Map world positions to continuous grid-index coordinates."""
        res = np.array(self.resolution, dtype=np.float64)
        extent = self.bounds_max - self.bounds_min
        return (points - self.bounds_min) / extent * (res - 1.0)


def corner_data(resolution, gcoords):
    """Flat base corner indices and trilinear weights for grid coords.

    Out-of-range coordinates are clamped to the boundary cell.  Returns
    (lin0, weights, corner_offsets): base linear index (P,), per-corner
    weights (P, 8), and the 8 linear index offsets.
    """
    nx, ny, nz = resolution
    res = np.array(resolution, dtype=np.float64)
    g = np.clip(gcoords, 0.0, res - 1.0)
    i0 = np.minimum(g.astype(np.int64), np.asarray(resolution) - 2)
    frac = g - i0
    lin0 = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    weights = np.empty((len(gcoords), 8))
    offsets = np.empty(8, dtype=np.int64)
    for idx, (dx, dy, dz) in enumerate(_CORNERS):
        wx = fx if dx else gx
        wy = fy if dy else gy
        wz = fz if dz else gz
        weights[:, idx] = wx * wy * wz
        offsets[idx] = (dx * ny + dy) * nz + dz
    return lin0, weights, offsets


def sample_with_corners(values: np.ndarray, corners) -> np.ndarray:
    """Trilinear gather of (C, ...) values given precomputed corner data."""
    lin0, weights, offsets = corners
    flat = np.ascontiguousarray(values.reshape(values.shape[0], -1).T)
    out = weights[:, 0:1] * flat[lin0 + offsets[0]]
    for idx in range(1, 8):
        out += weights[:, idx:idx + 1] * flat[lin0 + offsets[idx]]
    return out


def adjoint_with_corners(shape, corners, upstream, dtype=np.float64):
    """Scatter-add of upstream (P, C) given precomputed corner data."""
    c = shape[0]
    n_vox = shape[1] * shape[2] * shape[3]
    lin0, weights, offsets = corners
    grad = np.zeros(shape, dtype=dtype)
    flat = grad.reshape(c, -1)
    for idx in range(8):
        lin = lin0 + offsets[idx]
        w = weights[:, idx]
        for ch in range(c):
            flat[ch] += np.bincount(lin, weights=w * upstream[:, ch],
                                    minlength=n_vox).astype(dtype)
    return grad


def sample_grid_coords(values: np.ndarray, gcoords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of (C, Nx, Ny, Nz) values at grid coords (P, 3)."""
    return sample_with_corners(values, corner_data(values.shape[1:], gcoords))


def trilinear_sample(grid: VoxelGrid, points: np.ndarray) -> np.ndarray:
    """Sample a grid at world positions (P, 3); returns (P, C).

    Positions outside the bounds are clamped to the boundary cell.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidParameterError(f"points must be (P, 3), got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise InvalidParameterError("points contain NaN/Inf")
    return sample_grid_coords(grid.values, grid.world_to_grid(points))


def trilinear_adjoint(grid: VoxelGrid, points: np.ndarray,
                      upstream: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`trilinear_sample` w.r.t. the grid values.

    Scatters each upstream (P, C) vector to the 8 surrounding voxels with the
    forward interpolation weights.  Returns an array shaped like grid.values.
    """
    points = np.asarray(points, dtype=np.float64)
    upstream = np.asarray(upstream)
    if upstream.shape != (points.shape[0], grid.channels):
        raise InvalidParameterError(
            f"upstream shape {upstream.shape} does not match "
            f"({points.shape[0]}, {grid.channels})")
    return adjoint_grid_coords(grid.values.shape, grid.world_to_grid(points),
                               upstream, dtype=grid.values.dtype)


def adjoint_grid_coords(shape, gcoords, upstream, dtype=np.float64):
    """Scatter-add upstream vectors (P, C) into a (C, Nx, Ny, Nz) gradient."""
    return adjoint_with_corners(shape, corner_data(shape[1:], gcoords),
                                upstream, dtype)


def compute_shift(alpha_init: float, voxel_size: float) -> float:
    """Softplus shift b with 1 - exp(-softplus(b) * s) == alpha_init.

    b = log((1 - alpha_init)^(-1/s) - 1), evaluated through expm1/log1p so
    tiny alpha_init values keep full precision.
    """
    if not (0.0 < alpha_init < 1.0):
        raise InvalidParameterError(f"alpha_init must be in (0, 1), got {alpha_init}")
    if not voxel_size > 0.0:
        raise InvalidParameterError(f"voxel_size must be > 0, got {voxel_size}")
    return float(np.log(np.expm1(-np.log1p(-alpha_init) / voxel_size)))


@dataclass
class DensityActivation:
    """Shifted softplus mapping raw grid values to nonnegative densities.

    The shift pins the per-step opacity of a zero raw value to alpha_init at
    step size equal to the voxel size.
    """

    alpha_init: float
    voxel_size: float
    shift: float = field(init=False)

    def __post_init__(self):
        self.shift = compute_shift(self.alpha_init, self.voxel_size)

    def __call__(self, raw):
        # logaddexp(0, x) is the numerically stable softplus.
        return np.logaddexp(0.0, np.asarray(raw) + self.shift)

    def derivative(self, raw):
        return expit(np.asarray(raw) + self.shift)


def activate_density(raw, activation: DensityActivation):
    return activation(raw)


def _round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


@dataclass
class ExpandingBoxSchedule:
    """Linearly expanding trainable box for incremental voxel training.

    The box starts at the given fractional corners and reaches the full grid
    at iteration max_steps; voxels outside it are frozen.
    """

    p_min_init: np.ndarray
    p_max_init: np.ndarray
    max_steps: int
    resolution: tuple

    def __post_init__(self):
        self.p_min_init = np.asarray(self.p_min_init, dtype=np.float64)
        self.p_max_init = np.asarray(self.p_max_init, dtype=np.float64)
        if np.any(self.p_min_init < 0) or np.any(self.p_max_init > 1) \
                or np.any(self.p_min_init > self.p_max_init):
            raise InvalidParameterError(
                "require 0 <= p_min_init <= p_max_init <= 1 componentwise")
        if self.max_steps < 1:
            raise InvalidParameterError("max_steps must be positive")
        self.resolution = tuple(int(n) for n in self.resolution)

    def growth(self, i: int) -> float:
        return min(i / self.max_steps, 1.0)

    def box_corners(self, i: int):
        """Integer (p_min, p_max) voxel-index corners at iteration i.

        Corners are round-half-up of the fractional box scaled by the
        resolution; the active index range along each axis is [p_min, p_max).
        """
        if i < 0:
            raise InvalidParameterError("iteration must be >= 0")
        r = self.growth(i)
        n = np.array(self.resolution, dtype=np.float64)
        p_min = _round_half_up(self.p_min_init * (1.0 - r) * n)
        p_max = _round_half_up((self.p_max_init * (1.0 - r) + r) * n)
        return tuple(p_min), tuple(p_max)

    def freeze_mask(self, i: int) -> np.ndarray:
        """Boolean (Nx, Ny, Nz) mask, True where voxels are trainable."""
        p_min, p_max = self.box_corners(i)
        mask = np.zeros(self.resolution, dtype=bool)
        mask[p_min[0]:p_max[0], p_min[1]:p_max[1], p_min[2]:p_max[2]] = True
        return mask


def upsample_grid(grid: VoxelGrid, new_resolution) -> VoxelGrid:
    """Trilinearly resample a grid to a finer resolution; bounds unchanged."""
    new_resolution = tuple(int(n) for n in new_resolution)
    if any(nn < n for nn, n in zip(new_resolution, grid.resolution)):
        raise InvalidParameterError(
            f"cannot shrink {grid.resolution} -> {new_resolution}")
    if new_resolution == grid.resolution:
        return grid.copy()
    old = np.array(grid.resolution, dtype=np.float64)
    axes = [np.arange(n) * (o - 1.0) / (n - 1.0)
            for n, o in zip(new_resolution, old)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    gcoords = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    vals = sample_grid_coords(grid.values, gcoords)
    values = vals.T.reshape(grid.channels, *new_resolution).astype(grid.values.dtype)
    return VoxelGrid(values, grid.bounds_min.copy(), grid.bounds_max.copy())
