"""Optimization loop: Adam with exponential decay, the incremental-box
freeze, unobserved-pose sampling, and the coarse-to-fine pipeline."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .cameras import Camera, RayBatch, look_at
from .checkpoints import save_checkpoint
from .datasets import Dataset
from .errors import (ConfigurationError, InvalidParameterError,
                     TrainingDivergedError)
from .grids import ExpandingBoxSchedule, upsample_grid
from .losses import LossWeights, catv_loss, ds_loss, photometric_loss, tv_loss
from .rendering import (FieldGradients, RadianceField, RenderConfig,
                        rays_for_camera, render_backward, render_rays)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param))


def adam_step(param, grad, state: AdamState, lr, update_mask=None):
    """Bias-corrected Adam update, in place.

    Where update_mask is False neither the parameter nor the moments change
    (frozen voxels keep their optimizer state untouched).
    """
    grad = np.asarray(grad)
    if param.shape != grad.shape:
        raise InvalidParameterError(
            f"gradient shape {grad.shape} does not match parameter "
            f"{param.shape}")
    grad = grad.astype(param.dtype, copy=False)
    state.step += 1
    t = state.step
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = param - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)
    if update_mask is None:
        state.m, state.v = m, v
        param[...] = new
    else:
        state.m = np.where(update_mask, m, state.m)
        state.v = np.where(update_mask, v, state.v)
        param[...] = np.where(update_mask, new, param)
    return param, state


def lr_at(step: int, total: int, gamma: float = 0.1) -> float:
    """Exponential decay factor: 1 at step 0, gamma at step == total."""
    return float(gamma ** (step / total))


# ---------------------------------------------------------------------------
# Unobserved-pose sampling


@dataclass
class PoseSampler:
    """Camera-pose distribution for the depth-smoothness views."""

    mode: str                      # "hemisphere" | "plane" | "interpolate"
    radius: float | None = None
    plane_bounds: list | None = None  # [xmin, xmax, ymin, ymax, z]
    input_poses: list | None = None   # 3x4 c2w matrices
    target: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.mode == "hemisphere" and not self.radius:
            raise InvalidParameterError("hemisphere mode needs a radius")
        if self.mode == "plane" and (self.plane_bounds is None
                                     or len(self.plane_bounds) != 5):
            raise InvalidParameterError(
                "plane mode needs bounds [xmin, xmax, ymin, ymax, z]")
        if self.mode == "interpolate" and (self.input_poses is None
                                           or len(self.input_poses) < 2):
            raise InvalidParameterError(
                "interpolate mode needs at least two input poses")
        if self.mode not in ("hemisphere", "plane", "interpolate"):
            raise InvalidParameterError(f"unknown sampler mode {self.mode!r}")

    @classmethod
    def for_dataset(cls, dataset: Dataset) -> "PoseSampler":
        """Pick the distribution from scene metadata; fall back to pose
        interpolation when none is recorded."""
        poses = [dataset.cameras[i].c2w for i in dataset.indices("train")]
        if dataset.scene_type == "inward" and dataset.hemisphere_radius:
            return cls("hemisphere", radius=dataset.hemisphere_radius)
        if dataset.scene_type == "forward" and dataset.plane_bounds:
            cams = [dataset.cameras[i] for i in dataset.indices("train")]
            depth = np.mean([0.5 * (c.near + c.far) for c in cams])
            focus = np.mean([c.origin - c.rotation[:, 2] * depth for c in cams],
                            axis=0)
            return cls("plane", plane_bounds=list(dataset.plane_bounds),
                       target=focus)
        if len(poses) >= 2:
            return cls("interpolate", input_poses=poses)
        return cls("hemisphere",
                   radius=float(np.linalg.norm(poses[0][:, 3])) or 1.0)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One 3x4 camera-to-world pose."""
        if self.mode == "hemisphere":
            z = rng.uniform(0.0, 1.0)
            phi = rng.uniform(0.0, 2.0 * np.pi)
            s = np.sqrt(1.0 - z * z)
            pos = self.radius * np.array([s * np.cos(phi), s * np.sin(phi), z])
            return look_at(pos, self.target)
        if self.mode == "plane":
            xmin, xmax, ymin, ymax, zpl = self.plane_bounds
            pos = np.array([rng.uniform(xmin, xmax), rng.uniform(ymin, ymax),
                            zpl])
            return look_at(pos, self.target)
        i, j = rng.choice(len(self.input_poses), size=2, replace=False)
        u = rng.uniform(0.0, 1.0)
        pa, pb = self.input_poses[i], self.input_poses[j]
        rots = Rotation.from_matrix(np.stack([pa[:, :3], pb[:, :3]]))
        rot = Slerp([0.0, 1.0], rots)(u).as_matrix()
        trans = (1.0 - u) * pa[:, 3] + u * pb[:, 3]
        return np.column_stack([rot, trans])


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class StageConfig:
    name: str = "coarse"
    color_mode: str = "rgb"          # "rgb" | "feature"
    resolution: tuple = (64, 64, 64)
    feature_dim: int = 12
    iterations: int = 5000
    batch_rays: int = 8192
    sampled_rays: int = 16384
    patch_size: int = 8
    lr_grid: float = 0.1
    lr_net: float = 1e-3
    lr_decay: float = 0.1
    weights: LossWeights = dc_field(default_factory=LossWeights)
    incremental: bool = True
    max_box_steps: int = 256
    p_min_init: tuple = (0.2, 0.2, 0.2)
    p_max_init: tuple = (0.8, 0.8, 0.8)
    alpha_init: float = 1e-6
    step_ratio: float = 0.5          # sample spacing in voxel-size units
    huber_delta: float = 1.0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.resolution = tuple(int(n) for n in self.resolution)
        self.p_min_init = tuple(self.p_min_init)
        self.p_max_init = tuple(self.p_max_init)
        if min(self.iterations, self.batch_rays, self.sampled_rays) < 0:
            raise InvalidParameterError("counts must be nonnegative")


@dataclass
class TrainConfig:
    scene_type: str = "inward"       # "inward" | "forward"
    stages: list = dc_field(default_factory=lambda: [StageConfig()])
    seed: int = 0
    background: tuple = (1.0, 1.0, 1.0)
    bounds_min: tuple | None = None  # None: dataset bounds / NDC cube
    bounds_max: tuple | None = None
    depth_mode: str = "expected"
    dtype: str = "float32"
    shard_size: int = 8192

    def __post_init__(self):
        self.stages = [StageConfig(**s) if isinstance(s, dict) else s
                       for s in self.stages]
        if self.scene_type not in ("inward", "forward"):
            raise ConfigurationError(f"unknown scene type {self.scene_type!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = copy.deepcopy(d)
        return cls(**d)


def _stage(**kw) -> StageConfig:
    return StageConfig(**kw)


def preset(name: str) -> TrainConfig:
    """Named training presets with the reference hyperparameters baked in."""
    if name == "blender-4view":
        return TrainConfig(
            scene_type="inward",
            background=(1.0, 1.0, 1.0),
            stages=[
                _stage(name="coarse", color_mode="rgb", resolution=(100,) * 3,
                       iterations=5000, batch_rays=2 ** 13,
                       sampled_rays=2 ** 14,
                       weights=LossWeights(tvf=5e-5, tvd=5e-4, catv=5e-5,
                                           ds=5e-4)),
                _stage(name="fine", color_mode="feature",
                       resolution=(160,) * 3, iterations=5000,
                       batch_rays=2 ** 13, sampled_rays=2 ** 14,
                       weights=LossWeights(tvf=1e-5, tvd=5e-5, catv=5e-6,
                                           ds=1e-5)),
            ])
    if name == "llff-3view":
        return TrainConfig(
            scene_type="forward",
            background=(0.0, 0.0, 0.0),
            bounds_min=(-1.0, -1.0, -1.0),
            bounds_max=(1.0, 1.0, 1.0),
            stages=[
                _stage(name="fine", color_mode="feature",
                       resolution=(160, 160, 128), iterations=9000,
                       batch_rays=2 ** 12, sampled_rays=2 ** 14,
                       p_min_init=(0.0, 0.0, 0.995),
                       p_max_init=(1.0, 1.0, 1.0),
                       weights=LossWeights(tvf=5e-6, tvd=5e-5, catv=5e-6,
                                           ds=5e-4)),
            ])
    if name == "toy":
        return TrainConfig(
            scene_type="inward",
            background=(1.0, 1.0, 1.0),
            stages=[
                _stage(name="coarse", color_mode="rgb", resolution=(64,) * 3,
                       iterations=2000, batch_rays=4096, sampled_rays=1024,
                       alpha_init=1e-2,
                       weights=LossWeights(tvf=1e-7, tvd=1e-6, catv=1e-7,
                                           ds=1e-5)),
            ])
    if name == "toy-ablate":
        return TrainConfig(
            scene_type="inward",
            background=(1.0, 1.0, 1.0),
            stages=[
                _stage(name="coarse", color_mode="rgb", resolution=(64,) * 3,
                       iterations=800, batch_rays=1024, sampled_rays=512,
                       alpha_init=1e-2,
                       weights=LossWeights(tvf=1e-8, tvd=1e-7, catv=1e-8,
                                           ds=1e-6)),
            ])
    raise ConfigurationError(f"unknown preset {name!r}")


PRESET_NAMES = ("blender-4view", "llff-3view", "toy", "toy-ablate")


def load_config(path_or_preset: str) -> TrainConfig:
    """A preset name, or a TOML file with [train] and [[train.stages]]."""
    if path_or_preset in PRESET_NAMES:
        return preset(path_or_preset)
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    with open(path_or_preset, "rb") as f:
        data = tomllib.load(f)
    train = data.get("train", data)
    if "preset" in train:
        base = preset(train.pop("preset"))
        base_dict = base.to_dict()
        stages = train.pop("stages", None)
        base_dict.update(train)
        if stages is not None:
            base_dict["stages"] = stages
        return TrainConfig.from_dict(base_dict)
    return TrainConfig.from_dict(train)


# ---------------------------------------------------------------------------
# Training


def _scene_bounds(dataset: Dataset, config: TrainConfig):
    if config.bounds_min is not None:
        return (np.asarray(config.bounds_min, dtype=np.float64),
                np.asarray(config.bounds_max, dtype=np.float64))
    if config.scene_type == "forward":
        return np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0])
    if dataset.bounds_min is not None:
        return dataset.bounds_min, dataset.bounds_max
    return np.array([-1.5, -1.5, -1.5]), np.array([1.5, 1.5, 1.5])


def _make_stage_field(stage: StageConfig, bounds, prev: RadianceField | None,
                      dtype, rng) -> RadianceField:
    field = RadianceField.create(
        stage.resolution, bounds[0], bounds[1], mode=stage.color_mode,
        feature_dim=stage.feature_dim, alpha_init=stage.alpha_init, rng=rng,
        dtype=dtype)
    if prev is not None:
        field.density.values[...] = upsample_grid(
            prev.density, stage.resolution).values.astype(dtype)
    return field


def _render_config(config: TrainConfig, stage: StageConfig,
                   field: RadianceField) -> RenderConfig:
    return RenderConfig(
        step_size=stage.step_ratio * field.density.voxel_size,
        background=np.asarray(config.background, dtype=np.float64),
        depth_mode=config.depth_mode,
        use_ndc=config.scene_type == "forward",
        shard_size=config.shard_size)


def _collect_rays(dataset: Dataset, rcfg: RenderConfig):
    idx = dataset.indices("train")
    if not idx:
        raise InvalidParameterError("dataset has no training views")
    nears = {dataset.cameras[i].near for i in idx}
    fars = {dataset.cameras[i].far for i in idx}
    if len(nears) > 1 or len(fars) > 1:
        raise InvalidParameterError(
            "training views must share near/far planes")
    origins, dirs, colors = [], [], []
    for i in idx:
        rays = rays_for_camera(dataset.cameras[i], rcfg)
        origins.append(rays.origins)
        dirs.append(rays.directions)
        colors.append(dataset.images[i].reshape(-1, 3))
        t_near, t_far = rays.t_near, rays.t_far
    return (np.concatenate(origins), np.concatenate(dirs),
            np.concatenate(colors), t_near, t_far)


def _sample_patch_pixels(camera: Camera, n_patches: int, patch_size: int, rng):
    half = patch_size // 2
    cx = rng.integers(half, camera.width - (patch_size - half) + 1,
                      size=n_patches)
    cy = rng.integers(half, camera.height - (patch_size - half) + 1,
                      size=n_patches)
    offs = np.arange(patch_size)
    ox, oy = np.meshgrid(offs, offs)
    xs = (cx[:, None] - half + ox.ravel()[None, :]).ravel()
    ys = (cy[:, None] - half + oy.ravel()[None, :]).ravel()
    return np.stack([xs, ys], axis=1).astype(np.float64)


def train_stage(field: RadianceField, dataset: Dataset, config: TrainConfig,
                stage: StageConfig, rng: np.random.Generator | None = None,
                sampler: PoseSampler | None = None, snapshot_path=None):
    """Run one optimization stage in place; returns the per-iteration log."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    rcfg = _render_config(config, stage, field)
    origins, dirs, colors, t_near, t_far = _collect_rays(dataset, rcfg)
    n_rays = len(origins)
    ref_cam = dataset.cameras[dataset.indices("train")[0]]
    if sampler is None and stage.weights.ds > 0:
        sampler = PoseSampler.for_dataset(dataset)
    schedule = None
    if stage.incremental:
        schedule = ExpandingBoxSchedule(stage.p_min_init, stage.p_max_init,
                                        stage.max_box_steps,
                                        field.density.resolution)

    states = {"density": AdamState.like(field.density.values),
              "color": AdamState.like(field.color.values)}
    if field.net is not None:
        states["net"] = {k: AdamState.like(v)
                         for k, v in field.net.params.items()}

    weights = stage.weights
    n_patches = max(1, stage.sampled_rays // stage.patch_size ** 2)
    history = []
    for i in range(stage.iterations):
        # (1) photometric term on input-view rays
        sel = rng.integers(0, n_rays, size=stage.batch_rays)
        batch = RayBatch(origins[sel], dirs[sel], t_near, t_far)
        out, cache = render_rays(field, batch, rcfg, want_cache=True)
        photo, d_color = photometric_loss(out.color, colors[sel])
        grads = render_backward(field, cache, d_color)

        # (2) depth smoothness on rays from a sampled unobserved pose
        ds_val = 0.0
        if weights.ds > 0:
            pose = sampler.sample(rng)
            cam = Camera(ref_cam.width, ref_cam.height, ref_cam.fx, ref_cam.fy,
                         ref_cam.cx, ref_cam.cy, pose, ref_cam.near,
                         ref_cam.far)
            pixels = _sample_patch_pixels(cam, n_patches, stage.patch_size,
                                          rng)
            rays = rays_for_camera(cam, rcfg, pixels)
            out_d, cache_d = render_rays(field, rays, rcfg, want_cache=True)
            patches = out_d.depth.reshape(n_patches, stage.patch_size,
                                          stage.patch_size)
            ds_val, d_patches = ds_loss(patches, weights.ds)
            grads.add_(render_backward(field, cache_d,
                                       np.zeros((len(rays), 3)),
                                       d_patches.reshape(-1)))

        # (3) voxel-smoothness terms, directly on the grids
        tvf_val = tvd_val = catv_val = 0.0
        if weights.tvf > 0:
            l, g = tv_loss(field.color, "l2")
            tvf_val = weights.tvf * l
            grads.d_color += (weights.tvf * g).astype(grads.d_color.dtype)
        if weights.tvd > 0:
            l, g = tv_loss(field.density, "l2")
            tvd_val = weights.tvd * l
            grads.d_density += (weights.tvd * g).astype(grads.d_density.dtype)
        if weights.catv > 0:
            l, g, _ = catv_loss(field.density, field.color, stage.huber_delta)
            catv_val = weights.catv * l
            grads.d_density += (weights.catv * g).astype(grads.d_density.dtype)

        total = photo + tvf_val + tvd_val + catv_val + ds_val
        if not np.isfinite(total):
            if snapshot_path is not None:
                save_checkpoint(field, snapshot_path, step=i,
                                config=config.to_dict())
            raise TrainingDivergedError(
                f"non-finite loss at iteration {i}: photometric={photo} "
                f"tvf={tvf_val} tvd={tvd_val} catv={catv_val} ds={ds_val}")

        # (4-6) freeze peripheral voxels, then Adam with decayed lr
        mask = schedule.freeze_mask(i)[None] if schedule is not None else None
        factor = lr_at(i, stage.iterations, stage.lr_decay)
        adam_step(field.density.values, grads.d_density, states["density"],
                  stage.lr_grid * factor, mask)
        adam_step(field.color.values, grads.d_color, states["color"],
                  stage.lr_grid * factor, mask)
        if field.net is not None and grads.d_net is not None:
            for k, st in states["net"].items():
                adam_step(field.net.params[k], grads.d_net[k], st,
                          stage.lr_net * factor)

        history.append({"step": i, "photometric": photo, "tv_f": tvf_val,
                        "tv_d": tvd_val, "catv": catv_val, "ds": ds_val,
                        "total": total})
    return history


def train_pipeline(dataset: Dataset, config: TrainConfig, out_dir=None):
    """Run all configured stages; returns (field, history).

    Later stages inherit the previous stage's density grid (upsampled to the
    new resolution); a checkpoint is written after every stage when out_dir
    is given.
    """
    import os
    rng = np.random.default_rng(config.seed)
    bounds = _scene_bounds(dataset, config)
    dtype = np.dtype(config.dtype)
    sampler = None
    if any(s.weights.ds > 0 for s in config.stages):
        sampler = PoseSampler.for_dataset(dataset)

    field = None
    history = []
    for stage in config.stages:
        field = _make_stage_field(stage, bounds, field, dtype, rng)
        snapshot = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            snapshot = os.path.join(out_dir, f"{stage.name}_diverged.ckpt")
        rows = train_stage(field, dataset, config, stage, rng, sampler,
                           snapshot_path=snapshot)
        for r in rows:
            r["stage"] = stage.name
        history.extend(rows)
        if out_dir is not None:
            save_checkpoint(field, os.path.join(out_dir, f"{stage.name}.ckpt"),
                            step=stage.iterations, config=config.to_dict())
    return field, history


def write_history_csv(history, path) -> None:
    import csv
    cols = ["stage", "step", "photometric", "tv_f", "tv_d", "catv", "ds",
            "total"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in cols})
