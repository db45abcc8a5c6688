"""Command-line interface: make-toy, train, render, eval, ablate."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import datasets as ds_io
from .cameras import Camera
from .checkpoints import load_checkpoint
from .errors import InvalidParameterError
from .metrics import evaluate_images
from .rendering import RenderConfig, render_image
from .training import (TrainConfig, load_config, train_pipeline,
                       write_history_csv)


def _config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _render_config_from(config: dict) -> RenderConfig:
    cfg = TrainConfig.from_dict(config) if config else TrainConfig()
    return RenderConfig(background=np.asarray(cfg.background, dtype=np.float64),
                        depth_mode=cfg.depth_mode,
                        use_ndc=cfg.scene_type == "forward",
                        shard_size=cfg.shard_size)


def cmd_make_toy(args) -> int:
    if args.spec:
        with open(args.spec) as f:
            spec = ds_io.ToySceneSpec.from_dict(json.load(f))
    else:
        spec = ds_io.ToySceneSpec.default(seed=args.seed)
    ds_io.write_toy_dataset(spec, args.out)
    print(f"wrote toy dataset to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    dataset = ds_io.load_dataset(args.data)
    if args.views is not None:
        dataset = ds_io.subsample_views(dataset, args.views,
                                        config.seed if args.seed is None
                                        else args.seed)
    os.makedirs(args.out, exist_ok=True)
    t0 = time.time()
    field, history = train_pipeline(dataset, config, out_dir=args.out)
    write_history_csv(history, os.path.join(args.out, "train_log.csv"))
    print(f"trained {len(history)} iterations in {time.time() - t0:.1f}s; "
          f"checkpoints in {args.out}")
    return 0


def cmd_render(args) -> int:
    field, _, config = load_checkpoint(args.ckpt)
    rcfg = _render_config_from(config)
    with open(args.poses) as f:
        poses = json.load(f)
    if "camera_angle_x" not in poses or "frames" not in poses:
        raise InvalidParameterError(
            "poses file needs 'camera_angle_x' and 'frames'")
    width = args.width or poses.get("w", 64)
    height = args.height or poses.get("h", width)
    os.makedirs(args.out, exist_ok=True)
    for i, frame in enumerate(poses["frames"]):
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)[:3]
        cam = Camera.from_fov(width, height, poses["camera_angle_x"], c2w,
                              near=poses.get("near", 2.0),
                              far=poses.get("far", 6.0))
        color, depth = render_image(field, cam, rcfg)
        ds_io.save_image(os.path.join(args.out, f"r_{i:03d}.png"), color)
        if args.depth:
            ds_io.write_pfm(os.path.join(args.out, f"d_{i:03d}.pfm"), depth)
    print(f"rendered {len(poses['frames'])} views to {args.out}")
    return 0


def cmd_eval(args) -> int:
    field, _, config = load_checkpoint(args.ckpt)
    rcfg = _render_config_from(config)
    dataset = ds_io.load_dataset(args.data)
    idx = dataset.indices(args.split)
    if not idx:
        raise InvalidParameterError(f"dataset has no {args.split!r} views")
    t0 = time.time()
    rendered = [render_image(field, dataset.cameras[i], rcfg)[0] for i in idx]
    report = evaluate_images(rendered, [dataset.images[i] for i in idx],
                             config_hash=_config_hash(config),
                             wall_seconds=time.time() - t0)
    with open(args.report, "w") as f:
        json.dump(report.to_dict(), f, indent=1)
    print(f"mean PSNR {report.mean_psnr:.2f} dB, mean SSIM "
          f"{report.mean_ssim:.4f} over {report.n_views} views -> {args.report}")
    return 0


def ablation_variants():
    """The 8-row on/off matrix over (incremental, DS loss, CAVS loss)."""
    return [(inc, ds, cavs) for inc in (False, True) for ds in (False, True)
            for cavs in (False, True)]


def _apply_variant(config: TrainConfig, inc: bool, ds: bool,
                   cavs: bool) -> TrainConfig:
    out = TrainConfig.from_dict(config.to_dict())
    for stage in out.stages:
        stage.incremental = inc
        if not ds:
            stage.weights.ds = 0.0
        if not cavs:
            stage.weights.tvf = 0.0
            stage.weights.tvd = 0.0
            stage.weights.catv = 0.0
    return out


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    dataset = ds_io.load_dataset(args.data)
    if args.views is not None:
        dataset = ds_io.subsample_views(dataset, args.views, base.seed)
    test_idx = dataset.indices("test")
    if not test_idx:
        raise InvalidParameterError("ablation needs held-out test views")
    rows = []
    for inc, ds, cavs in ablation_variants():
        psnrs, ssims = [], []
        for s in range(args.seeds):
            cfg = _apply_variant(base, inc, ds, cavs)
            cfg.seed = base.seed + s
            field, _ = train_pipeline(dataset, cfg)
            rcfg = _render_config_from(cfg.to_dict())
            rendered = [render_image(field, dataset.cameras[i], rcfg)[0]
                        for i in test_idx]
            rep = evaluate_images(rendered,
                                  [dataset.images[i] for i in test_idx])
            psnrs.append(rep.mean_psnr)
            ssims.append(rep.mean_ssim)
        rows.append((inc, ds, cavs, float(np.mean(psnrs)),
                     float(np.mean(ssims))))
        print(f"inc={int(inc)} ds={int(ds)} cavs={int(cavs)} "
              f"psnr={rows[-1][3]:.2f} ssim={rows[-1][4]:.4f}")
    with open(args.out, "w") as f:
        f.write("inc,ds,cavs,psnr,ssim\n")
        for inc, ds, cavs, p, s in rows:
            f.write(f"{int(inc)},{int(ds)},{int(cavs)},{p:.4f},{s:.6f}\n")
    print(f"wrote {len(rows)} ablation rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelrf",
        description="Sparse-view voxel radiance field reconstruction")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("make-toy", help="generate a toy dataset")
    p.add_argument("--spec", help="toy scene spec JSON (default: built-in)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("train", help="train a radiance field")
    p.add_argument("--config", required=True,
                   help="TOML config file or preset name "
                        "(blender-4view, llff-3view, toy, toy-ablate)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--views", type=int, help="subsample k training views")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render novel views from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--poses", required=True, help="transforms-style JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--depth", action="store_true", help="also write PFM depth")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="metric report JSON path")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate",
                       help="run the 8-row component on/off ablation matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--config", default="toy-ablate")
    p.add_argument("--views", type=int)
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except Exception as exc:  # single-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
