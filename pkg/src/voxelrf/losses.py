"""Loss terms for sparse-view voxel training, each with its exact gradient.

Neighbor convention for the voxel-smoothness terms: the per-voxel aggregate
is the mean of an elementwise penalty against the existing axis neighbors
(3 to 6 of them at boundaries) and over channels; the reported loss is the
raw sum of these aggregates over all voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, InvalidParameterError
from .grids import VoxelGrid

DEFAULT_HUBER_DELTA = 1.0


@dataclass
class LossWeights:
    """Regularizer weights for one training stage."""

    tvf: float = 0.0
    tvd: float = 0.0
    catv: float = 0.0
    ds: float = 0.0

    def __post_init__(self):
        if min(self.tvf, self.tvd, self.catv, self.ds) < 0:
            raise InvalidParameterError("loss weights must be nonnegative")


def _penalty(kind, huber_delta):
    if kind == "l2":
        return lambda d: (d * d, 2.0 * d)
    if kind == "l1":
        return lambda d: (np.abs(d), np.sign(d))
    if kind == "huber":
        def huber(d):
            clipped = np.clip(d, -huber_delta, huber_delta)
            val = np.where(np.abs(d) <= huber_delta, 0.5 * d * d,
                           huber_delta * (np.abs(d) - 0.5 * huber_delta))
            return val, clipped
        return huber
    raise ConfigurationError(f"unknown penalty {kind!r}")


def _neighbor_counts(shape):
    """Number of existing axis neighbors per voxel (3..6)."""
    n = np.zeros(shape, dtype=np.float64)
    for ax in range(3):
        n += 2.0
        idx_lo = [slice(None)] * 3
        idx_lo[ax] = 0
        idx_hi = [slice(None)] * 3
        idx_hi[ax] = shape[ax] - 1
        n[tuple(idx_lo)] -= 1.0
        n[tuple(idx_hi)] -= 1.0
    return n


def weighted_tv(values: np.ndarray, penalty: str, voxel_weight=None,
                huber_delta=DEFAULT_HUBER_DELTA):
    """sum_v weight_v * Delta(v) with Delta the mean neighbor penalty.

    values: (C, Nx, Ny, Nz).  Returns (loss, gradient w.r.t. values); the
    voxel weights are treated as constants.
    """
    c = values.shape[0]
    spatial = values.shape[1:]
    rho = _penalty(penalty, huber_delta)
    coef = 1.0 / (_neighbor_counts(spatial) * c)
    if voxel_weight is not None:
        coef = coef * voxel_weight
    loss = 0.0
    grad = np.zeros(values.shape, dtype=np.float64)
    for ax in range(3):
        lo = [slice(None)] * 4
        lo[1 + ax] = slice(None, -1)
        hi = [slice(None)] * 4
        hi[1 + ax] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        diff = values[lo] - values[hi]
        val, deriv = rho(diff)
        # Each edge (v, u) contributes to both endpoints' aggregates.
        pair_coef = (coef[lo[1:]] + coef[hi[1:]])[None]
        loss += float((pair_coef * val).sum())
        g = pair_coef * deriv
        grad[lo] += g
        grad[hi] -= g
    return loss, grad


def tv_loss(grid: VoxelGrid, penalty="l2", huber_delta=DEFAULT_HUBER_DELTA):
    """Total-variation smoothness of a voxel grid."""
    return weighted_tv(np.asarray(grid.values, dtype=np.float64), penalty,
                       huber_delta=huber_delta)


def color_awareness(feature_grid: VoxelGrid) -> np.ndarray:
    """Per-voxel mean L1 variation of the sigmoid-activated features.

    Values lie in [0, 1) since activated features are in (0, 1).
    """
    act = expit(np.asarray(feature_grid.values, dtype=np.float64))
    c = act.shape[0]
    spatial = act.shape[1:]
    acc = np.zeros(spatial, dtype=np.float64)
    for ax in range(3):
        lo = [slice(None)] * 4
        lo[1 + ax] = slice(None, -1)
        hi = [slice(None)] * 4
        hi[1 + ax] = slice(1, None)
        d = np.abs(act[tuple(lo)] - act[tuple(hi)]).sum(axis=0)
        acc[tuple(lo[1:])] += d
        acc[tuple(hi[1:])] += d
    return acc / (_neighbor_counts(spatial) * c)


def catv_loss(density_grid: VoxelGrid, feature_grid: VoxelGrid,
              huber_delta=DEFAULT_HUBER_DELTA):
    """Color-aware TV: Huber density variation down-weighted at color edges.

    The exp(-F_CA) weight is a constant in the backward pass, so the feature
    grid receives an identically zero gradient (returned explicitly).
    """
    if density_grid.resolution != feature_grid.resolution:
        raise InvalidParameterError(
            f"resolution mismatch: density {density_grid.resolution} vs "
            f"feature {feature_grid.resolution}")
    weight = np.exp(-color_awareness(feature_grid))
    loss, d_density = weighted_tv(
        np.asarray(density_grid.values, dtype=np.float64), "huber",
        voxel_weight=weight, huber_delta=huber_delta)
    return loss, d_density, np.zeros(feature_grid.values.shape)


def cavs_loss(density_grid: VoxelGrid, feature_grid: VoxelGrid,
              weights: LossWeights, huber_delta=DEFAULT_HUBER_DELTA):
    """Combined voxel-smoothness loss; returns (loss, d_density, d_feature)."""
    loss = 0.0
    d_density = np.zeros(density_grid.values.shape, dtype=np.float64)
    d_feature = np.zeros(feature_grid.values.shape, dtype=np.float64)
    if weights.tvf:
        l, g = tv_loss(feature_grid, "l2")
        loss += weights.tvf * l
        d_feature += weights.tvf * g
    if weights.tvd:
        l, g = tv_loss(density_grid, "l2")
        loss += weights.tvd * l
        d_density += weights.tvd * g
    if weights.catv:
        l, g, _ = catv_loss(density_grid, feature_grid, huber_delta)
        loss += weights.catv * l
        d_density += weights.catv * g
    return loss, d_density, d_feature


def photometric_loss(rendered: np.ndarray, target: np.ndarray):
    """Mean squared color error over rays; returns (loss, d_rendered)."""
    rendered = np.atleast_2d(np.asarray(rendered, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if rendered.shape != target.shape or rendered.shape[0] == 0:
        raise InvalidParameterError(
            f"need matching non-empty ray colors, got {rendered.shape} vs "
            f"{target.shape}")
    n = rendered.shape[0]
    diff = rendered - target
    return float((diff * diff).sum() / n), 2.0 * diff / n


def ds_loss(patches: np.ndarray, lambda_ds: float):
    """Depth-smoothness: squared forward differences over rendered patches.

    patches: (P, s, s) depth values, one patch per center ray.  Returns
    (loss, d_patches) with loss = lambda_ds / P * sum of squared differences.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim == 2:
        patches = patches[None]
    if patches.ndim != 3 or patches.shape[1] != patches.shape[2] \
            or patches.shape[1] < 2:
        raise InvalidParameterError(
            f"patches must be (P, s, s) with s >= 2, got {patches.shape}")
    n = patches.shape[0]
    dx = patches[:, :, 1:] - patches[:, :, :-1]
    dy = patches[:, 1:, :] - patches[:, :-1, :]
    scale = lambda_ds / n
    loss = scale * float((dx * dx).sum() + (dy * dy).sum())
    grad = np.zeros_like(patches)
    grad[:, :, 1:] += 2.0 * dx
    grad[:, :, :-1] -= 2.0 * dx
    grad[:, 1:, :] += 2.0 * dy
    grad[:, :-1, :] -= 2.0 * dy
    return loss, scale * grad


def total_loss(photometric: float, cavs: float, ds: float) -> float:
    """Sum of the three loss groups (weights already inside each)."""
    return photometric + cavs + ds
