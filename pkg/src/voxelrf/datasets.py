"""Dataset loading, toy-scene generation, and image file I/O.

The toy scene doubles as an acceptance oracle: its renderer marches rays
against analytic primitives (no grids, no shared sampling code with the
field renderer) so the two pipelines can be cross-checked.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image

from .cameras import Camera, look_at
from .errors import InvalidParameterError
from .grids import VoxelGrid, compute_shift
from .rendering import RadianceField

META_FILENAME = "scene_meta.json"


@dataclass
class Dataset:
    images: list              # (H, W, 3) float arrays in [0, 1]
    cameras: list             # Camera per image
    split: list               # "train" | "test" per image
    scene_type: str = "inward"
    bounds_min: np.ndarray | None = None
    bounds_max: np.ndarray | None = None
    hemisphere_radius: float | None = None
    plane_bounds: list | None = None  # [xmin, xmax, ymin, ymax, z]
    background: np.ndarray = dc_field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        if len(self.images) != len(self.cameras) or len(self.images) != len(self.split):
            raise InvalidParameterError("images, cameras, split must align")
        shapes = {im.shape for im in self.images}
        if len(shapes) > 1:
            raise InvalidParameterError(f"mixed image resolutions: {shapes}")

    def indices(self, split: str) -> list:
        return [i for i, s in enumerate(self.split) if s == split]

    def subset(self, indices) -> "Dataset":
        return Dataset([self.images[i] for i in indices],
                       [self.cameras[i] for i in indices],
                       [self.split[i] for i in indices],
                       self.scene_type, self.bounds_min, self.bounds_max,
                       self.hemisphere_radius, self.plane_bounds,
                       self.background)


def load_image(path, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """PNG/JPG as float RGB in [0, 1]; alpha is premultiplied over background."""
    if not os.path.isfile(path):
        raise IOError(f"image file not found: {path}")
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.shape[2] == 4:
        alpha = arr[:, :, 3:4]
        arr = arr[:, :, :3] * alpha + np.asarray(background) * (1.0 - alpha)
    return arr[:, :, :3]


def save_image(path, image) -> None:
    data = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((data * 255.0 + 0.5).astype(np.uint8)).save(path)


def write_pfm(path, depth) -> None:
    """Grayscale PFM (little-endian, scale -1) for float depth maps."""
    depth = np.asarray(depth, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{depth.shape[1]} {depth.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(depth).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise IOError(f"not a grayscale PFM file: {path}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
    return np.flipud(data.reshape(h, w)).copy()


def load_transforms_json(path, split="train", near=2.0, far=6.0,
                         background=(1.0, 1.0, 1.0)) -> Dataset:
    """Load a synthetic-scene camera manifest plus its images.

    Expects a horizontal field of view (``camera_angle_x``) and per-frame 4x4
    camera-to-world matrices with image paths, the de-facto format of
    inward-facing synthetic datasets.
    """
    if not os.path.isfile(path):
        raise IOError(f"manifest not found: {path}")
    with open(path) as f:
        data = json.load(f)
    if "camera_angle_x" not in data:
        raise InvalidParameterError("manifest missing field 'camera_angle_x'")
    if "frames" not in data:
        raise InvalidParameterError("manifest missing field 'frames'")
    base = os.path.dirname(os.path.abspath(path))
    images, cameras = [], []
    for i, frame in enumerate(data["frames"]):
        for key in ("file_path", "transform_matrix"):
            if key not in frame:
                raise InvalidParameterError(f"frame {i} missing field '{key}'")
        img_path = os.path.join(base, frame["file_path"])
        if not os.path.splitext(img_path)[1]:
            img_path += ".png"
        image = load_image(img_path, background)
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        h, w = image.shape[:2]
        camera = Camera.from_fov(w, h, float(data["camera_angle_x"]), c2w[:3],
                                 near=near, far=far)
        images.append(image)
        cameras.append(camera)
    return Dataset(images, cameras, [split] * len(images),
                   background=np.asarray(background, dtype=np.float64))


def load_forward_json(path, background=(0.0, 0.0, 0.0)) -> Dataset:
    """Minimal forward-facing loader: per-image 3x4 poses + bounds sidecar."""
    if not os.path.isfile(path):
        raise IOError(f"manifest not found: {path}")
    with open(path) as f:
        data = json.load(f)
    for key in ("frames", "focal"):
        if key not in data:
            raise InvalidParameterError(f"manifest missing field '{key}'")
    base = os.path.dirname(os.path.abspath(path))
    images, cameras, split = [], [], []
    for i, frame in enumerate(data["frames"]):
        for key in ("file_path", "pose", "near", "far"):
            if key not in frame:
                raise InvalidParameterError(f"frame {i} missing field '{key}'")
        image = load_image(os.path.join(base, frame["file_path"]), background)
        h, w = image.shape[:2]
        focal = float(data["focal"])
        cameras.append(Camera(w, h, focal, focal, 0.5 * w, 0.5 * h,
                              np.asarray(frame["pose"], dtype=np.float64),
                              near=float(frame["near"]), far=float(frame["far"])))
        images.append(image)
        split.append(frame.get("split", "train"))
    return Dataset(images, cameras, split, scene_type="forward",
                   plane_bounds=data.get("plane_bounds"),
                   background=np.asarray(background, dtype=np.float64))


def load_dataset(directory, background=None) -> Dataset:
    """Load a dataset directory written by make-toy (manifests + metadata)."""
    meta_path = os.path.join(directory, META_FILENAME)
    meta = {}
    if os.path.isfile(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
    bg = np.asarray(background if background is not None
                    else meta.get("background", [1.0, 1.0, 1.0]), dtype=np.float64)
    near = meta.get("near", 2.0)
    far = meta.get("far", 6.0)
    parts = []
    for split in ("train", "test"):
        manifest = os.path.join(directory, f"transforms_{split}.json")
        if os.path.isfile(manifest):
            parts.append(load_transforms_json(manifest, split, near, far, bg))
    if not parts:
        raise IOError(f"no transforms_*.json manifests in {directory}")
    ds = Dataset(sum((p.images for p in parts), []),
                 sum((p.cameras for p in parts), []),
                 sum((p.split for p in parts), []),
                 scene_type=meta.get("scene_type", "inward"),
                 hemisphere_radius=meta.get("hemisphere_radius"),
                 plane_bounds=meta.get("plane_bounds"),
                 background=bg)
    if "bounds_min" in meta:
        ds.bounds_min = np.asarray(meta["bounds_min"], dtype=np.float64)
        ds.bounds_max = np.asarray(meta["bounds_max"], dtype=np.float64)
    return ds


def subsample_views(dataset: Dataset, k: int, seed: int) -> Dataset:
    """Seeded uniform k-subset of the train views; test split untouched."""
    train = dataset.indices("train")
    if k > len(train):
        raise InvalidParameterError(
            f"asked for {k} views but only {len(train)} are available")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(train), size=k, replace=False))
    keep = [train[i] for i in chosen] + dataset.indices("test")
    return dataset.subset(keep)


# ---------------------------------------------------------------------------
# Toy scenes


@dataclass
class Primitive:
    kind: str          # "sphere" | "box"
    center: tuple
    size: float | tuple  # radius, or half-extents for boxes
    albedo: tuple
    density: float = 40.0

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        center = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(points - center, axis=-1) - float(self.size)
        if self.kind == "box":
            half = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,))
            q = np.abs(points - center) - half
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        raise InvalidParameterError(f"unknown primitive kind {self.kind!r}")


@dataclass
class ToySceneSpec:
    primitives: list
    background: tuple = (1.0, 1.0, 1.0)
    n_cameras: int = 16
    n_test_cameras: int = 8
    ring_radius: float = 4.0
    elevation: float = 0.5       # radians above the equator
    image_size: int = 64
    bounds_min: tuple = (-1.5, -1.5, -1.5)
    bounds_max: tuple = (1.5, 1.5, 1.5)
    edge_width: float = 0.15     # smooth falloff shell around each primitive
    march_step: float = 0.02     # oracle ray-march step, world units
    seed: int = 0

    @classmethod
    def default(cls, seed=0, **overrides) -> "ToySceneSpec":
        """Eight random soft primitives inside the unit-ish scene box."""
        rng = np.random.default_rng(seed)
        prims = []
        for _ in range(8):
            kind = "sphere" if rng.random() < 0.6 else "box"
            center = rng.uniform(-0.8, 0.8, size=3)
            size = rng.uniform(0.18, 0.42) if kind == "sphere" \
                else tuple(rng.uniform(0.15, 0.35, size=3))
            albedo = tuple(rng.uniform(0.1, 0.9, size=3))
            prims.append(Primitive(kind, tuple(center), size, albedo))
        return cls(primitives=prims, seed=seed, **overrides)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "primitives"}
        d["primitives"] = [p.__dict__.copy() for p in self.primitives]
        return _to_jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ToySceneSpec":
        d = dict(d)
        prims = [Primitive(**{k: _to_tuple(v) for k, v in p.items()})
                 for p in d.pop("primitives")]
        return cls(primitives=prims, **{k: _to_tuple(v) for k, v in d.items()})


def _to_jsonable(x):
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def _to_tuple(v):
    return tuple(v) if isinstance(v, list) else v


def scene_density_albedo(spec: ToySceneSpec, points: np.ndarray):
    """Analytic density and albedo of the toy scene at world points.

    Each primitive has constant interior density with a smoothstep falloff
    over the edge shell; albedo is the density-weighted primitive mix.
    """
    points = np.atleast_2d(points)
    total = np.zeros(len(points))
    color_acc = np.zeros((len(points), 3))
    w = spec.edge_width
    for prim in spec.primitives:
        sd = prim.signed_distance(points)
        x = np.clip((w - sd) / (2.0 * w), 0.0, 1.0)
        factor = x * x * (3.0 - 2.0 * x)
        d = prim.density * factor
        total += d
        color_acc += d[:, None] * np.asarray(prim.albedo)
    eps = 1e-9
    albedo = (color_acc + eps * 0.5) / (total + eps)[:, None]
    return total, albedo


def toy_cameras(spec: ToySceneSpec):
    """Training ring plus an offset held-out test ring of look-at cameras."""
    diag = 0.5 * np.linalg.norm(np.asarray(spec.bounds_max)
                                - np.asarray(spec.bounds_min))
    near = max(0.05, spec.ring_radius - 1.2 * diag)
    far = spec.ring_radius + 1.2 * diag
    fov = 2.0 * np.arctan(1.15 * diag / spec.ring_radius)

    def ring(count, elevation, offset):
        cams = []
        for k in range(count):
            phi = 2.0 * np.pi * k / count + offset
            pos = spec.ring_radius * np.array([
                np.cos(phi) * np.cos(elevation),
                np.sin(phi) * np.cos(elevation),
                np.sin(elevation)])
            cams.append(Camera.from_fov(spec.image_size, spec.image_size, fov,
                                        look_at(pos, (0.0, 0.0, 0.0)),
                                        near=near, far=far))
        return cams

    train = ring(spec.n_cameras, spec.elevation, 0.0)
    test = ring(spec.n_test_cameras, spec.elevation * 0.6,
                np.pi / max(spec.n_cameras, 1))
    return train, test


def oracle_render(spec: ToySceneSpec, camera: Camera, march_step=None):
    """Ground-truth render by dense analytic ray marching.

    Independent of the voxel-field pipeline: uniform march between the camera
    near/far planes, analytic density/albedo, quadrature compositing.
    """
    step = march_step if march_step is not None else spec.march_step
    xs, ys = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    dirs_cam = np.stack([(xs.ravel() - camera.cx) / camera.fx,
                         -(ys.ravel() - camera.cy) / camera.fy,
                         -np.ones(xs.size)], axis=1)
    dirs = dirs_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ts = np.arange(camera.near + 0.5 * step, camera.far, step)
    bg = np.asarray(spec.background, dtype=np.float64)

    image = np.empty((xs.size, 3))
    # March in pixel chunks to bound the (rays x samples) working set.
    chunk = max(1, int(2_000_000 / max(len(ts), 1)))
    for s in range(0, xs.size, chunk):
        d = dirs[s:s + chunk]
        pts = camera.origin + ts[None, :, None] * d[:, None, :]
        density, albedo = scene_density_albedo(spec, pts.reshape(-1, 3))
        density = density.reshape(len(d), len(ts))
        albedo = albedo.reshape(len(d), len(ts), 3)
        tau = density * step
        trans = np.exp(-(np.cumsum(tau, axis=1) - tau))
        weights = trans * -np.expm1(-tau)
        t_final = trans[:, -1] * np.exp(-tau[:, -1])
        image[s:s + chunk] = (weights[..., None] * albedo).sum(axis=1) \
            + t_final[:, None] * bg
    return image.reshape(camera.height, camera.width, 3)


def generate_toy_scene(spec: ToySceneSpec) -> Dataset:
    """Toy dataset: oracle-rendered ring views plus a held-out test ring."""
    train_cams, test_cams = toy_cameras(spec)
    cameras = train_cams + test_cams
    images = [oracle_render(spec, cam) for cam in cameras]
    split = ["train"] * len(train_cams) + ["test"] * len(test_cams)
    return Dataset(images, cameras, split, scene_type="inward",
                   bounds_min=np.asarray(spec.bounds_min, dtype=np.float64),
                   bounds_max=np.asarray(spec.bounds_max, dtype=np.float64),
                   hemisphere_radius=spec.ring_radius,
                   background=np.asarray(spec.background, dtype=np.float64))


def scene_to_field(spec: ToySceneSpec, resolution=128,
                   dtype=np.float64) -> RadianceField:
    """Explicit voxel field whose activated values match the analytic scene
    at the voxel centers (up to trilinear discretization)."""
    res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
    bmin = np.asarray(spec.bounds_min, dtype=np.float64)
    bmax = np.asarray(spec.bounds_max, dtype=np.float64)
    axes = [np.linspace(bmin[a], bmax[a], res[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    density, albedo = scene_density_albedo(spec, pts)

    voxel_size = float(np.mean((bmax - bmin) / (np.array(res) - 1.0)))
    shift = compute_shift(1e-6, voxel_size)
    # Invert the activations: raw = softplus^-1(density) - shift, logit(albedo).
    raw_density = np.where(density > 1e-12,
                           np.log(np.expm1(np.maximum(density, 1e-12))),
                           -25.0) - shift
    a = np.clip(albedo, 1e-4, 1.0 - 1e-4)
    raw_color = np.log(a / (1.0 - a))

    density_grid = VoxelGrid(raw_density.reshape(1, *res).astype(dtype),
                             bmin, bmax)
    color_grid = VoxelGrid(raw_color.T.reshape(3, *res).astype(dtype),
                           bmin, bmax)
    from .grids import DensityActivation
    return RadianceField(density_grid, color_grid,
                         DensityActivation(1e-6, voxel_size), mode="rgb")


def write_toy_dataset(spec: ToySceneSpec, out_dir: str) -> Dataset:
    """Render a toy scene and write it as manifests + PNGs (make-toy output)."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    dataset = generate_toy_scene(spec)
    train_cams, _ = toy_cameras(spec)
    fov = 2.0 * np.arctan(0.5 * train_cams[0].width / train_cams[0].fx)
    frames = {"train": [], "test": []}
    for i, (img, cam, split) in enumerate(zip(dataset.images, dataset.cameras,
                                              dataset.split)):
        rel = f"images/{split}_{i:03d}.png"
        save_image(os.path.join(out_dir, rel), img)
        c2w = np.vstack([cam.c2w, [0.0, 0.0, 0.0, 1.0]])
        frames[split].append({"file_path": rel,
                              "transform_matrix": c2w.tolist()})
    for split, items in frames.items():
        with open(os.path.join(out_dir, f"transforms_{split}.json"), "w") as f:
            json.dump({"camera_angle_x": fov, "frames": items}, f, indent=1)
    meta = {
        "scene_type": "inward",
        "hemisphere_radius": spec.ring_radius,
        "bounds_min": list(spec.bounds_min),
        "bounds_max": list(spec.bounds_max),
        "background": list(spec.background),
        "near": dataset.cameras[0].near,
        "far": dataset.cameras[0].far,
    }
    with open(os.path.join(out_dir, META_FILENAME), "w") as f:
        json.dump(_to_jsonable(meta), f, indent=1)
    with open(os.path.join(out_dir, "toy_spec.json"), "w") as f:
        json.dump(spec.to_dict(), f, indent=1)
    return dataset
