"""Command-line interface: train, render, trace, invrender, eval, bench,
make-data, replay.

Every command requires an explicit seed (default 0; no entropy is drawn from
the environment), runs with a fixed torch thread count (--threads, default 1
for bitwise reproducibility), and writes a manifest JSON capturing the full
resolved configuration so any run can be replayed.

Exit codes: 0 success, 2 usage or file errors, 3 numeric failure (NaN).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .camera import camera_from_json, camera_to_json, load_cameras, save_cameras
from .cloud import PointCloud, load_ply, save_ply
from .grid import (NeighborBatch, QueryConfig, build_grid, cost_counters, query_rays,
                   reset_cost_counters)
from .imgio import ensure_dir, load_png, save_f32, save_png
from .invrender import InverseConfig, InverseProblem, View, optimize
from .mesh import intersect_rays
from .model import (ModelConfig, NumericError, assemble_features, init_params,
                    load_checkpoint)
from .raycast import canonicalize_batch, cast_rays, gather_batch
from .render import load_scene, path_trace, render_image, Scene
from .train import (TrainConfig, build_shape_pool, capture_rgbd, evaluate,
                    generate_shape, rgbd_to_cloud, sample_cameras, train)

ROOM_PRESET = {"k": 100, "delta": 0.2}


def _write_manifest(path, command: str, params: dict) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "params": params,
        "argv": _manifest_argv(command, params),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _manifest_argv(command: str, params: dict) -> list[str]:
    argv = [command]
    for key, val in sorted(params.items()):
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            if val:
                argv.append(flag)
        elif val is not None:
            argv += [flag, str(val)]
    return argv


def _resolve_query(args) -> QueryConfig:
    preset = ROOM_PRESET if getattr(args, "preset", None) == "room" else {}
    k = args.k if args.k is not None else preset.get("k", 40)
    delta = args.delta if args.delta is not None else preset.get("delta", 0.1)
    return QueryConfig(k=int(k), delta=float(delta))


def cmd_render(args) -> int:
    cfg = _resolve_query(args)
    cloud = load_ply(args.cloud)
    cameras = load_cameras(args.camera)
    model = load_checkpoint(args.ckpt)
    scene = Scene(cloud=cloud, grid=build_grid(cloud))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = render_image(scene, cameras[0], model, cfg, spp=args.spp, seed=args.seed)
    save_png(str(out) + ".png", result.color)
    save_f32(str(out) + ".depth.f32", result.depth.astype(np.float32))
    save_f32(str(out) + ".normal.f32", result.normal.astype(np.float32))
    save_f32(str(out) + ".hit.f32", result.hit.astype(np.float32))
    _write_manifest(str(out) + ".manifest.json", "render", {
        "cloud": args.cloud, "camera": args.camera, "ckpt": args.ckpt,
        "k": cfg.k, "delta": cfg.delta, "spp": args.spp, "seed": args.seed,
        "threads": args.threads, "out": args.out,
    })
    return 0


def cmd_trace(args) -> int:
    cfg = _resolve_query(args)
    scene = load_scene(args.scene)
    cameras = load_cameras(args.camera)
    model = load_checkpoint(args.ckpt) if args.ckpt else None
    if scene.cloud is not None and model is None:
        raise ValueError("--ckpt is required for scenes containing a point cloud")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    image = path_trace(scene, cameras[0], model, cfg, bounces=args.bounces,
                       spp=args.spp, seed=args.seed)
    save_png(str(out) + ".png", image)
    save_f32(str(out) + ".hdr.f32", image.astype(np.float32))
    _write_manifest(str(out) + ".manifest.json", "trace", {
        "scene": args.scene, "camera": args.camera, "ckpt": args.ckpt,
        "bounces": args.bounces, "spp": args.spp, "k": cfg.k, "delta": cfg.delta,
        "seed": args.seed, "threads": args.threads, "out": args.out,
    })
    return 0


def cmd_train(args) -> int:
    with open(args.config) as fh:
        cfg = TrainConfig.from_json(json.load(fh))
    out = ensure_dir(args.out)
    _write_manifest(out / "manifest.json", "train", {
        "config": args.config, "out": args.out, "resume": args.resume,
        "seed": args.seed, "threads": args.threads,
    })
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)
    train(cfg, out, resume=args.resume,
          log_hook=lambda row: print(
              f"iter {row['iteration']:6d} loss {row['total']:.4f} lr {row['lr']:.2e}",
              file=sys.stderr) if row["iteration"] % 50 == 0 else None)
    return 0


def cmd_invrender(args) -> int:
    with open(args.problem) as fh:
        spec = json.load(fh)
    base = Path(args.problem).parent
    cloud = load_ply(base / spec["cloud"])
    views = []
    for v in spec["views"]:
        cam = camera_from_json(v["camera"]) if isinstance(v["camera"], dict) \
            else load_cameras(base / v["camera"])[0]
        image = load_png(base / v["image"])
        mask = np.asarray(load_png(base / v["mask"]))[..., 0]
        views.append(View(image=image, mask=mask, camera=cam))
    cfg_dict = dict(spec.get("config", {}))
    cfg_dict.setdefault("seed", args.seed)
    icfg = InverseConfig(**cfg_dict)
    model = load_checkpoint(args.ckpt if args.ckpt else base / spec["ckpt"])
    out = ensure_dir(args.out)
    _write_manifest(out / "manifest.json", "invrender", {
        "problem": args.problem, "ckpt": args.ckpt, "out": args.out,
        "seed": args.seed, "threads": args.threads,
    })
    problem = InverseProblem(cloud=cloud, views=views, model=model, cfg=icfg)
    refined, _ = optimize(problem, out_dir=out)
    save_ply(out / "refined.ply", refined)
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    cfg = _resolve_query(args)
    rng = np.random.default_rng(args.dataset_seed)
    pool = build_shape_pool(("sphere", "box", "torus"), 3, args.dataset_seed, detail=2)
    rows = []
    for i, mesh in enumerate(pool):
        cams = sample_cameras(rng, 6, (1.5, 2.5), 0.5, 64)
        cloud = rgbd_to_cloud([capture_rgbd(mesh, c) for c in cams])
        eval_cams = sample_cameras(rng, args.views, (1.5, 2.5), 0.5, args.resolution)
        metrics = evaluate(model, mesh, cloud, eval_cams, cfg)
        rows.append({"scene": i, **metrics})
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "scene"}
    rows.append({"scene": "mean", **mean})
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    cols = ["scene", "depth_rmse", "normal_angle_deg", "hit_accuracy", "psnr_db"]
    with open(report, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(f"{row[c]:.9g}" if c != "scene" else str(row[c])
                              for c in cols) + "\n")
    _write_manifest(str(report) + ".manifest.json", "eval", {
        "ckpt": args.ckpt, "dataset_seed": args.dataset_seed, "report": args.report,
        "k": cfg.k, "delta": cfg.delta, "views": args.views,
        "resolution": args.resolution, "seed": args.seed, "threads": args.threads,
    })
    print(json.dumps(mean, indent=2, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    """Time the rendering pipeline phases on uniform random points and rays."""
    model = load_checkpoint(args.ckpt) if args.ckpt else init_params(ModelConfig(),
                                                                      seed=args.seed)
    cfg = _resolve_query(args)
    rng = np.random.default_rng(args.seed)
    pts = rng.uniform(-1.0, 1.0, size=(args.points, 3))
    cloud = PointCloud(pts)
    origins = rng.uniform(-1.0, 1.0, size=(args.rays, 3))
    dirs = rng.normal(size=(args.rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    t0 = time.perf_counter()
    grid = build_grid(cloud, args.grid)
    t_build = time.perf_counter() - t0

    reset_cost_counters()
    t0 = time.perf_counter()
    nb = query_rays(grid, cloud, origins, dirs, cfg)
    t_search = time.perf_counter() - t0
    counters = cost_counters()

    rows = np.flatnonzero(nb.counts > 0)
    t_canon = t_model = 0.0
    chunk = 8192
    with torch.no_grad():
        for s in range(0, len(rows), chunk):
            sel = rows[s:s + chunk]
            kmax = max(int(nb.counts[sel].max()), 1)
            sub = NeighborBatch(nb.indices[sel, :kmax], nb.mask[sel, :kmax], nb.counts[sel])
            pos, col, cap, hc, ha, mask = gather_batch(cloud, sub)
            o_t = torch.from_numpy(origins[sel]).to(torch.float32)
            d_t = torch.from_numpy(dirs[sel]).to(torch.float32)
            t0 = time.perf_counter()
            rotation, canonical, z0 = canonicalize_batch(o_t, d_t, pos, mask)
            t_canon += time.perf_counter() - t0
            cap_r = torch.einsum("bij,bkfj->bkfi", rotation,
                                 cap.reshape(len(sel), kmax, 4, 3)).reshape(len(sel), kmax, 12)
            feats = assemble_features(canonical, col, cap_r * mask[..., None].float(),
                                      hc, ha)
            t0 = time.perf_counter()
            model(feats, mask)
            t_model += time.perf_counter() - t0
    total = t_build + t_search + t_canon + t_model
    other = t_build
    phases = {
        "neighbor-search": t_search,
        "canonicalize": t_canon,
        "model": t_model,
        "other": other,
    }
    wall = sum(phases.values())
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    with open(report, "w") as fh:
        fh.write("category,seconds,fraction\n")
        for name, secs in phases.items():
            fh.write(f"{name},{secs:.6f},{secs / wall:.6f}\n")
        fh.write("counters,,\n")
        for name, val in counters.items():
            fh.write(f"{name},{val},\n")
    _write_manifest(str(report) + ".manifest.json", "bench", {
        "points": args.points, "rays": args.rays, "grid": args.grid,
        "k": cfg.k, "delta": cfg.delta, "report": args.report,
        "seed": args.seed, "threads": args.threads, "ckpt": args.ckpt,
    })
    print(json.dumps({**{k: round(v, 4) for k, v in phases.items()},
                      **counters}, indent=2, sort_keys=True))
    return 0


def cmd_make_data(args) -> int:
    """Synthesize a demo scene: cloud PLY, cameras, images, masks, problem spec."""
    rng = np.random.default_rng(args.seed)
    mesh = generate_shape(args.seed, args.kind, detail=3)
    out = ensure_dir(args.out)
    images_dir = ensure_dir(out / "images")
    masks_dir = ensure_dir(out / "masks")
    cams = sample_cameras(rng, args.views, (1.6, 2.4), 0.3, args.resolution)
    captures = [capture_rgbd(mesh, c) for c in cams]
    noisy = []
    views_spec = []
    for i, cap in enumerate(captures):
        save_png(images_dir / f"view_{i:03d}.png", cap.color)
        mask = np.isfinite(cap.depth).astype(np.float64)
        save_png(masks_dir / f"view_{i:03d}.png", np.repeat(mask[..., None], 3, axis=2))
        depth = cap.depth.copy()
        if args.noise > 0:
            jitter = rng.normal(scale=args.noise, size=depth.shape)
            depth = np.where(np.isfinite(depth), depth + jitter, depth)
        noisy.append(type(cap)(cap.color, depth, cap.camera))
        views_spec.append({
            "image": f"images/view_{i:03d}.png",
            "mask": f"masks/view_{i:03d}.png",
            "camera": camera_to_json(cap.camera),
        })
    cloud = rgbd_to_cloud(noisy)
    save_ply(out / "cloud.ply", cloud)
    save_cameras(out / "cameras.json", cams)
    with open(out / "problem.json", "w") as fh:
        json.dump({"cloud": "cloud.ply", "views": views_spec, "config": {}}, fh, indent=2)
    with open(out / "scene.json", "w") as fh:
        json.dump({"cloud": "cloud.ply", "environment": {"constant": [1.0, 1.0, 1.0]}},
                  fh, indent=2)
    _write_manifest(out / "manifest.json", "make-data", {
        "seed": args.seed, "out": args.out, "kind": args.kind, "views": args.views,
        "resolution": args.resolution, "noise": args.noise, "threads": args.threads,
    })
    return 0


def cmd_replay(args) -> int:
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    return main(manifest["argv"])


def _add_common(p, seed_default=0):
    p.add_argument("--seed", type=int, default=seed_default,
                   help="RNG seed (no environment entropy is used)")
    p.add_argument("--threads", type=int, default=1,
                   help="torch thread count; 1 guarantees bitwise reproducibility")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudray",
        description="Point-cloud ray casting: learned cloud-ray intersection, "
                    "path tracing, and inverse rendering.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="image-based rendering of a point cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--preset", choices=["room"], default=None)
    p.add_argument("--spp", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("trace", help="path trace a scene (cloud + analytic)")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--bounces", type=int, default=4)
    p.add_argument("--spp", type=int, default=2000)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--preset", choices=["room"], default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("train", help="train the intersection operator")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("invrender", help="optimize a noisy cloud against images")
    p.add_argument("--problem", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_invrender)

    p = sub.add_parser("eval", help="metrics on seeded procedural test scenes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset-seed", type=int, default=0)
    p.add_argument("--report", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--preset", choices=["room"], default=None)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--resolution", type=int, default=48)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time pipeline phases on uniform points")
    p.add_argument("--points", type=int, default=10000)
    p.add_argument("--rays", type=int, default=10000)
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--preset", choices=["room"], default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--report", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("make-data", help="synthesize a demo capture + problem")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", default="sphere")
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--resolution", type=int, default=48)
    p.add_argument("--noise", type=float, default=0.0)
    _add_common(p)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "threads"):
        torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"cloudray: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"cloudray: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"cloudray: invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
