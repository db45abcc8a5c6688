"""Differentiable volume rendering of voxel radiance fields.

Forward pass: clip rays to the grid bounds, sample uniformly, query density
and color by trilinear interpolation, composite by emission-absorption
quadrature.  Backward pass: hand-derived adjoint of the whole chain down to
the raw grid values and network parameters.

Rays are embarrassingly parallel: batches are split into fixed-size shards
(independent of worker count) and results are merged in shard order, so
multi-threaded output is bitwise identical to the single-threaded path.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import expit

from .cameras import Camera, RayBatch, generate_rays, ndc_warp
from .errors import ConfigurationError, InvalidParameterError
from .grids import (DensityActivation, VoxelGrid, adjoint_with_corners,
                    corner_data, sample_with_corners)
from .mlp import ColorMLP


def default_workers() -> int:
    return max(1, int(os.environ.get("THREADS", os.cpu_count() or 1)))


@dataclass
class RadianceField:
    """Density grid plus either an explicit RGB grid or feature grid + MLP."""

    density: VoxelGrid
    color: VoxelGrid
    activation: DensityActivation
    mode: str = "rgb"  # "rgb" | "feature"
    net: ColorMLP | None = None

    def __post_init__(self):
        if self.density.channels != 1:
            raise ConfigurationError("density grid must have one channel")
        if self.mode == "rgb":
            if self.color.channels != 3:
                raise ConfigurationError("rgb mode needs a 3-channel color grid")
        elif self.mode == "feature":
            if self.net is None:
                raise ConfigurationError("feature mode needs a color network")
            if self.color.channels != self.net.feature_dim:
                raise ConfigurationError(
                    f"feature grid has {self.color.channels} channels but the "
                    f"network expects {self.net.feature_dim}")
        else:
            raise ConfigurationError(f"unknown color mode {self.mode!r}")

    @classmethod
    def create(cls, resolution, bounds_min, bounds_max, mode="rgb",
               feature_dim=12, alpha_init=1e-6, rng=None, dtype=np.float32):
        """Field with raw density and colors/features at zero.

        Zero raw density gives per-step opacity alpha_init; zero raw color is
        mid-gray after the sigmoid.
        """
        density = VoxelGrid.zeros(1, resolution, bounds_min, bounds_max, dtype)
        if mode == "rgb":
            color = VoxelGrid.zeros(3, resolution, bounds_min, bounds_max, dtype)
            net = None
        else:
            color = VoxelGrid.zeros(feature_dim, resolution, bounds_min,
                                    bounds_max, dtype)
            net = ColorMLP(feature_dim=feature_dim)
            net.init_params(rng or np.random.default_rng(0), dtype=dtype)
        activation = DensityActivation(alpha_init, density.voxel_size)
        return cls(density, color, activation, mode, net)


@dataclass
class RenderConfig:
    step_size: float | None = None       # None: 0.5 x voxel size
    background: np.ndarray = dc_field(default_factory=lambda: np.ones(3))
    depth_mode: str = "expected"         # "expected" | "accumulated" (as printed)
    use_ndc: bool = False
    shard_size: int = 8192
    workers: int | None = None           # None: THREADS env / cpu count

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.depth_mode not in ("expected", "accumulated"):
            raise ConfigurationError(f"unknown depth mode {self.depth_mode!r}")

    def resolved_step(self, field: RadianceField) -> float:
        return self.step_size if self.step_size is not None \
            else 0.5 * field.density.voxel_size


@dataclass
class RenderOutput:
    color: np.ndarray                # (R, 3)
    depth: np.ndarray                # (R,)
    weights: np.ndarray              # (R, S) per-sample contribution weights
    final_transmittance: np.ndarray  # (R,)


@dataclass
class FieldGradients:
    """Gradients w.r.t. raw density, raw color/feature grid, and the network."""

    d_density: np.ndarray
    d_color: np.ndarray
    d_net: dict | None = None

    def add_(self, other: "FieldGradients") -> "FieldGradients":
        self.d_density += other.d_density
        self.d_color += other.d_color
        if other.d_net is not None:
            if self.d_net is None:
                self.d_net = {k: v.copy() for k, v in other.d_net.items()}
            else:
                for k in self.d_net:
                    self.d_net[k] += other.d_net[k]
        return self

    @classmethod
    def zeros_like(cls, field: RadianceField) -> "FieldGradients":
        d_net = None
        if field.net is not None:
            d_net = {k: np.zeros_like(v) for k, v in field.net.params.items()}
        return cls(np.zeros_like(field.density.values),
                   np.zeros_like(field.color.values), d_net)


def ray_box_intersection(origins, directions, bounds_min, bounds_max):
    """Slab-method entry/exit distances; (t_in, t_out) with t_in > t_out on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (bounds_min - origins) * inv
        t1 = (bounds_max - origins) * inv
    # Axis-parallel rays: inv is +-inf, products are +-inf or nan (origin on a
    # slab plane); nan means "no constraint from this axis".
    lo = np.fmin(t0, t1)
    hi = np.fmax(t0, t1)
    t_in = np.nanmax(np.where(np.isnan(lo), -np.inf, lo), axis=1)
    t_out = np.nanmin(np.where(np.isnan(hi), np.inf, hi), axis=1)
    return t_in, t_out


def sample_points_batch(rays: RayBatch, bounds_min, bounds_max, step: float):
    """Uniform samples along each ray, clipped to the box.

    Returns (t, mask): padded (R, S) sample distances and a validity mask.
    Samples sit at cell midpoints t_in + (k + 0.5) * step, so every valid
    sample lies strictly inside the box; rays that miss get zero samples.
    """
    if step <= 0:
        raise InvalidParameterError("step must be positive")
    t_in, t_out = ray_box_intersection(rays.origins, rays.directions,
                                       np.asarray(bounds_min, dtype=np.float64),
                                       np.asarray(bounds_max, dtype=np.float64))
    t_in = np.maximum(t_in, max(rays.t_near, 0.0))
    t_out = np.minimum(t_out, rays.t_far)
    length = np.maximum(t_out - t_in, 0.0)
    counts = np.floor(length / step + 1e-9).astype(np.int64)
    s_max = int(counts.max()) if len(counts) else 0
    if s_max == 0:
        return np.zeros((len(rays), 0)), np.zeros((len(rays), 0), dtype=bool)
    k = np.arange(s_max)
    t = t_in[:, None] + (k[None, :] + 0.5) * step
    mask = k[None, :] < counts[:, None]
    return t, mask


def sample_points(ray_origin, ray_direction, t_near, t_far, bounds_min,
                  bounds_max, step):
    """Single-ray sampling: (t values, positions, deltas)."""
    rays = RayBatch(ray_origin, ray_direction, t_near, t_far)
    t, mask = sample_points_batch(rays, bounds_min, bounds_max, step)
    t = t[0][mask[0]]
    positions = rays.origins[0] + t[:, None] * rays.directions[0]
    deltas = np.full(len(t), step)
    return t, positions, deltas


def _composite_arrays(sigma, color, delta, t, mask, background, depth_mode):
    """Quadrature compositing on padded (R, S) arrays."""
    tau = sigma * delta * mask
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))                    # T_i before sample i
    alpha = -np.expm1(-tau)
    weights = trans * alpha * mask
    t_final = np.exp(-cum[:, -1]) if tau.shape[1] else np.ones(tau.shape[0])
    out_color = (weights[..., None] * color).sum(axis=1) \
        + t_final[:, None] * background
    if depth_mode == "expected":
        depth = (weights * t).sum(axis=1)
    else:  # accumulated opacity, the variant as printed in the source method
        depth = weights.sum(axis=1)
    return RenderOutput(out_color, depth, weights, t_final), trans


def composite(sigma, color, delta, background, t, depth_mode="expected"):
    """Composite one ray: sigma, delta, t are (N,), color is (N, 3)."""
    sigma = np.asarray(sigma, dtype=np.float64).reshape(1, -1)
    color = np.asarray(color, dtype=np.float64).reshape(1, -1, 3)
    delta = np.asarray(delta, dtype=np.float64).reshape(1, -1)
    t = np.asarray(t, dtype=np.float64).reshape(1, -1)
    if not (sigma.shape[1] == color.shape[1] == delta.shape[1] == t.shape[1]):
        raise InvalidParameterError("sigma/color/delta/t length mismatch")
    if np.any(sigma < 0):
        raise InvalidParameterError("negative density")
    if np.any(delta <= 0):
        raise InvalidParameterError("non-positive sample spacing")
    mask = np.ones_like(sigma, dtype=bool)
    out, _ = _composite_arrays(sigma, color, delta, t, mask,
                               np.asarray(background, dtype=np.float64),
                               depth_mode)
    return RenderOutput(out.color[0], out.depth[0], out.weights[0],
                        out.final_transmittance[0])


def query_field(field: RadianceField, positions, view_dirs=None,
                want_cache=False):
    """Density and color at world positions; view_dirs needed in feature mode."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    dens, col = field.density, field.color
    cd_d = corner_data(dens.resolution, dens.world_to_grid(positions))
    if dens.resolution == col.resolution \
            and np.array_equal(dens.bounds_min, col.bounds_min) \
            and np.array_equal(dens.bounds_max, col.bounds_max):
        cd_c = cd_d
    else:
        cd_c = corner_data(col.resolution, col.world_to_grid(positions))
    raw_sigma = sample_with_corners(dens.values, cd_d)[:, 0]
    sigma = field.activation(raw_sigma)
    raw_interp = sample_with_corners(col.values, cd_c)
    net_cache = None
    if field.mode == "rgb":
        raw_color = raw_interp
    else:
        if view_dirs is None:
            raise ConfigurationError("feature mode requires view directions")
        view_dirs = np.atleast_2d(np.asarray(view_dirs, dtype=np.float64))
        raw_color, net_cache = field.net.forward(raw_interp, positions, view_dirs)
    color = expit(raw_color)
    if not want_cache:
        return sigma, color
    cache = {"positions": positions, "raw_sigma": raw_sigma,
             "color": color, "net_cache": net_cache,
             "cd_d": cd_d, "cd_c": cd_c}
    return sigma, color, cache


def query_backward(field: RadianceField, cache, d_sigma, d_color):
    """Adjoint of query_field: gradients on the raw grids and the network."""
    d_raw_sigma = d_sigma * field.activation.derivative(cache["raw_sigma"])
    d_density = adjoint_with_corners(field.density.values.shape,
                                     cache["cd_d"], d_raw_sigma[:, None],
                                     dtype=field.density.values.dtype)
    c = cache["color"]
    d_raw_color = d_color * c * (1.0 - c)
    d_net = None
    if field.mode == "rgb":
        d_feat = d_raw_color
    else:
        d_feat, d_net = field.net.backward(cache["net_cache"], d_raw_color)
    d_color_grid = adjoint_with_corners(field.color.values.shape,
                                        cache["cd_c"], d_feat,
                                        dtype=field.color.values.dtype)
    return FieldGradients(d_density, d_color_grid, d_net)


def _render_shard(field, rays, config, step, want_cache):
    t, mask = sample_points_batch(rays, field.density.bounds_min,
                                  field.density.bounds_max, step)
    n_rays, s_max = mask.shape
    flat_ray, flat_k = np.nonzero(mask)
    positions = rays.origins[flat_ray] + t[flat_ray, flat_k][:, None] \
        * rays.directions[flat_ray]
    view_dirs = None
    if field.mode == "feature":
        unit = rays.directions / np.linalg.norm(rays.directions, axis=1,
                                                keepdims=True)
        view_dirs = unit[flat_ray]
    if len(positions):
        sigma_f, color_f, qcache = query_field(field, positions, view_dirs,
                                               want_cache=True)
    else:
        sigma_f = np.zeros(0)
        color_f = np.zeros((0, 3))
        qcache = None
    sigma = np.zeros((n_rays, s_max))
    color = np.zeros((n_rays, s_max, 3))
    sigma[flat_ray, flat_k] = sigma_f
    color[flat_ray, flat_k] = color_f
    delta = np.full_like(t, step)
    out, trans = _composite_arrays(sigma, color, delta, t, mask,
                                   config.background, config.depth_mode)
    if not want_cache:
        return out, None
    cache = {"t": t, "mask": mask, "flat_ray": flat_ray, "flat_k": flat_k,
             "sigma": sigma, "color": color, "trans": trans, "out": out,
             "qcache": qcache, "step": step, "n_rays": n_rays}
    return out, cache


def _shard_slices(n, shard_size):
    return [slice(i, min(i + shard_size, n)) for i in range(0, n, shard_size)]


def render_rays(field: RadianceField, rays: RayBatch, config: RenderConfig,
                want_cache=False):
    """Render a ray batch; optionally keep the intermediates for backward."""
    step = config.resolved_step(field)
    slices = _shard_slices(len(rays), config.shard_size) or [slice(0, 0)]

    def run(sl):
        sub = RayBatch(rays.origins[sl], rays.directions[sl],
                       rays.t_near, rays.t_far)
        return _render_shard(field, sub, config, step, want_cache)

    workers = config.workers or default_workers()
    if workers > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, slices))
    else:
        results = [run(sl) for sl in slices]

    outs = [r[0] for r in results]
    s_max = max(o.weights.shape[1] for o in outs)
    weights = np.zeros((len(rays), s_max))
    row = 0
    for o in outs:
        weights[row:row + len(o.color), :o.weights.shape[1]] = o.weights
        row += len(o.color)
    merged = RenderOutput(
        np.concatenate([o.color for o in outs]),
        np.concatenate([o.depth for o in outs]),
        weights,
        np.concatenate([o.final_transmittance for o in outs]))
    if not want_cache:
        return merged
    cache = {"shards": [r[1] for r in results], "config": config,
             "n_rays": len(rays)}
    return merged, cache


def _backward_shard(field, shard, config, d_color_rays, d_depth_rays):
    t, mask = shard["t"], shard["mask"]
    if mask.size == 0 or shard["qcache"] is None:
        return FieldGradients.zeros_like(field)
    weights = shard["out"].weights
    trans = shard["trans"]
    t_final = shard["out"].final_transmittance
    step = shard["step"]

    # Per-sample scalar payload a_i: d(loss)/d(w_i) for this ray's output.
    a = np.einsum("rc,rsc->rs", d_color_rays, shard["color"])
    if config.depth_mode == "expected":
        a = a + d_depth_rays[:, None] * t
    else:
        a = a + d_depth_rays[:, None]
    b_bg = d_color_rays @ config.background

    aw = a * weights
    suffix = np.flip(np.cumsum(np.flip(aw, axis=1), axis=1), axis=1) - aw
    d_tau = a * (trans - weights) - suffix - (t_final * b_bg)[:, None]
    d_sigma_pad = d_tau * step * mask
    d_color_pad = weights[..., None] * d_color_rays[:, None, :]

    flat_ray, flat_k = shard["flat_ray"], shard["flat_k"]
    d_sigma = d_sigma_pad[flat_ray, flat_k]
    d_color = d_color_pad[flat_ray, flat_k]
    return query_backward(field, shard["qcache"], d_sigma, d_color)


def render_backward(field: RadianceField, cache, d_color, d_depth=None):
    """Gradients of sum(d_color * color) + sum(d_depth * depth) w.r.t. the field.

    Shard gradient buffers are merged in fixed shard order, so the result is
    reproducible regardless of worker count.
    """
    config = cache["config"]
    d_color = np.asarray(d_color, dtype=np.float64)
    if d_color.shape != (cache["n_rays"], 3):
        raise InvalidParameterError(
            f"upstream color gradient must be ({cache['n_rays']}, 3), got "
            f"{d_color.shape}")
    if d_depth is None:
        d_depth = np.zeros(cache["n_rays"])
    d_depth = np.asarray(d_depth, dtype=np.float64)

    total = FieldGradients.zeros_like(field)
    row = 0
    for shard in cache["shards"]:
        n = shard["n_rays"]
        grads = _backward_shard(field, shard, config,
                                d_color[row:row + n], d_depth[row:row + n])
        total.add_(grads)
        row += n
    return total


def rays_for_camera(camera: Camera, config: RenderConfig,
                    pixels=None) -> RayBatch:
    rays = generate_rays(camera, camera.pixel_grid() if pixels is None else pixels)
    if config.use_ndc:
        rays = ndc_warp(rays, camera)
    return rays


def render_image(field: RadianceField, camera: Camera, config: RenderConfig):
    """Full-frame render: ((H, W, 3) color, (H, W) depth)."""
    out = render_rays(field, rays_for_camera(camera, config), config)
    h, w = camera.height, camera.width
    return out.color.reshape(h, w, 3), out.depth.reshape(h, w)


def patch_pixels(camera: Camera, patch_center, patch_size: int) -> np.ndarray:
    """Integer pixel coordinates of a square patch; must fit in the image."""
    cx, cy = patch_center
    x0 = int(round(cx)) - patch_size // 2
    y0 = int(round(cy)) - patch_size // 2
    if x0 < 0 or y0 < 0 or x0 + patch_size > camera.width \
            or y0 + patch_size > camera.height:
        raise InvalidParameterError("patch exceeds the image bounds")
    xs, ys = np.meshgrid(np.arange(x0, x0 + patch_size),
                         np.arange(y0, y0 + patch_size))
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def render_depth_patch(field: RadianceField, camera: Camera, patch_center,
                       patch_size: int, config: RenderConfig) -> np.ndarray:
    """(patch_size, patch_size) array of per-ray depth estimates."""
    pixels = patch_pixels(camera, patch_center, patch_size)
    out = render_rays(field, rays_for_camera(camera, config, pixels), config)
    return out.depth.reshape(patch_size, patch_size)
