"""Inverse rendering: optimize point positions and colors of a noisy cloud
against clean RGB images and foreground masks, by gradients through the
frozen intersection operator.

Per iteration one cloud point is projected into every view and rays are cast
from the surrounding pixel patch; the loss combines color matching, hit
likelihood against the mask, and optional normal-map smoothness between
pixel-adjacent rays.  Silhouette carving and operator-guided point insertion
run on a fixed cadence.  Neighbor selection is recomputed from the moved
points every iteration (the grid rebuild is O(n)).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import Camera, _camera_dirs, camera_rays, project
from .cloud import PointCloud
from .grid import NeighborBatch, QueryConfig, build_grid, query_rays
from .model import CloudRayModel
from .raycast import run_operator


@dataclass
class View:
    image: np.ndarray   # (H, W, 3) linear color in [0, 1]
    mask: np.ndarray    # (H, W) in [0, 1]
    camera: Camera


@dataclass
class InverseConfig:
    lr: float = 0.01
    iterations: int = 10000
    patch: int = 10
    carve_every: int = 150
    rays_per_iter: int = 10000
    normal_smooth_weight: float = 0.1
    insert_fraction: float = 0.01
    k: int = 40
    delta: float = 0.1
    seed: int = 0


@dataclass
class InverseProblem:
    cloud: PointCloud
    views: list[View]
    model: CloudRayModel
    cfg: InverseConfig = field(default_factory=InverseConfig)

    def __post_init__(self):
        if not self.views:
            raise ValueError("inverse rendering needs at least one view")


def bilinear(img: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear lookup at continuous pixel coordinates (texel centers at +0.5)."""
    h, w = img.shape[:2]
    x = np.clip(xy[:, 0] - 0.5, 0.0, w - 1.0)
    y = np.clip(xy[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 else np.zeros(len(x), np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 else np.zeros(len(y), np.int64)
    fx = (x - x0) if w > 1 else np.zeros_like(x)
    fy = (y - y0) if h > 1 else np.zeros_like(y)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if img.ndim == 2:
        img = img[..., None]
    out = (img[y0, x0] * ((1 - fx) * (1 - fy))[:, None]
           + img[y0, x1] * (fx * (1 - fy))[:, None]
           + img[y1, x0] * ((1 - fx) * fy)[:, None]
           + img[y1, x1] * (fx * fy)[:, None])
    return out[:, 0] if out.shape[1] == 1 else out


@dataclass
class RayBundle:
    """Patch rays with their image targets and pixel-adjacency pairs."""

    origins: np.ndarray
    dirs: np.ndarray
    target_color: np.ndarray   # (B, 3) bilinear image colors
    target_mask: np.ndarray    # (B,) bilinear mask values
    pairs_u: np.ndarray        # (P, 2) adjacent ray indices in image x
    pairs_v: np.ndarray        # (P, 2) adjacent ray indices in image y


def build_patch_bundle(views: list[View], positions: np.ndarray, point_index: int,
                       patch: int, max_rays: int) -> RayBundle | None:
    """Rays from the patch around one point's projection in every view.

    Views are included whole (keeping patches intact for the adjacency terms)
    until the ray budget is reached.
    """
    origins, dirs, t_color, t_mask, pu, pv = [], [], [], [], [], []
    count = 0
    for view in views:
        if count + patch * patch > max_rays and count > 0:
            break
        cam = view.camera
        pix, _, in_front = project(cam, positions[point_index][None])
        if not in_front[0]:
            continue
        cx = int(np.clip(np.floor(pix[0, 0]) - patch // 2, 0, max(cam.width - patch, 0)))
        cy = int(np.clip(np.floor(pix[0, 1]) - patch // 2, 0, max(cam.height - patch, 0)))
        if not (0 <= pix[0, 0] < cam.width and 0 <= pix[0, 1] < cam.height):
            continue
        px = min(patch, cam.width)
        py = min(patch, cam.height)
        xs, ys = np.meshgrid(np.arange(cx, cx + px), np.arange(cy, cy + py))
        samples = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
        d = _camera_dirs(cam, samples)
        base = count
        origins.append(np.broadcast_to(cam.position, d.shape).copy())
        dirs.append(d)
        t_color.append(bilinear(view.image, samples))
        t_mask.append(bilinear(view.mask, samples))
        idx = np.arange(px * py).reshape(py, px) + base
        pu.append(np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1))
        pv.append(np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1))
        count += px * py
    if not origins:
        return None
    return RayBundle(np.concatenate(origins), np.concatenate(dirs),
                     np.concatenate(t_color), np.concatenate(t_mask),
                     np.concatenate(pu) if pu else np.zeros((0, 2), np.int64),
                     np.concatenate(pv) if pv else np.zeros((0, 2), np.int64))


def inverse_loss(model: CloudRayModel, positions_t: torch.Tensor, colors_t: torch.Tensor,
                 nb: NeighborBatch, bundle: RayBundle,
                 normal_smooth_weight: float = 0.1):
    """Color, hit, and normal-smoothness terms over one ray bundle.

    Rays without neighbors are structural misses and contribute nothing (no
    output exists to compare); the color term is weighted by the mask value so
    background pixels supervise only the hit probability.  Returns
    (total, breakdown dict); every term is nonnegative.
    """
    dt = positions_t.dtype
    rows = np.flatnonzero(nb.counts > 0)
    if len(rows) == 0:
        zero = torch.zeros((), dtype=dt)
        return zero, {"color": 0.0, "hit": 0.0, "smooth": 0.0, "total": 0.0}
    kmax = max(int(nb.counts[rows].max()), 1)
    sel = np.maximum(nb.indices[rows, :kmax], 0)
    mask_np = nb.mask[rows, :kmax]
    mask = torch.from_numpy(mask_np)
    pos = positions_t[torch.from_numpy(sel)]
    col = colors_t[torch.from_numpy(sel)]
    b = len(rows)
    capture = torch.zeros((b, kmax, 12), dtype=dt)
    has_c = torch.from_numpy(mask_np.astype(np.float64)).to(dt)
    has_a = torch.zeros((b, kmax), dtype=dt)
    o_t = torch.from_numpy(bundle.origins[rows]).to(dt)
    d_t = torch.from_numpy(bundle.dirs[rows]).to(dt)
    out, _, n_world, color = run_operator(model, o_t, d_t, pos, col, capture,
                                          has_c, has_a, mask)
    y = torch.from_numpy(bundle.target_mask[rows]).to(dt)
    c_hat = torch.from_numpy(bundle.target_color[rows]).to(dt)
    color_term = (y * ((color - c_hat) ** 2).sum(dim=-1)).sum()
    h = out.hit_prob.clamp(1e-7, 1.0 - 1e-7)
    hit_term = (-(y * torch.log(h) + (1.0 - y) * torch.log(1.0 - h))).sum()

    smooth = torch.zeros((), dtype=dt)
    if normal_smooth_weight > 0:
        lookup = np.full(len(nb.counts), -1, dtype=np.int64)
        lookup[rows] = np.arange(len(rows))
        for pairs in (bundle.pairs_u, bundle.pairs_v):
            if len(pairs) == 0:
                continue
            a = lookup[pairs[:, 0]]
            bbb = lookup[pairs[:, 1]]
            ok = (a >= 0) & (bbb >= 0)
            if not ok.any():
                continue
            cross = torch.linalg.cross(n_world[torch.from_numpy(a[ok])],
                                       n_world[torch.from_numpy(bbb[ok])])
            smooth = smooth + cross.pow(2).sum()
        smooth = normal_smooth_weight * smooth
    total = color_term + hit_term + smooth
    return total, {"color": float(color_term.detach()), "hit": float(hit_term.detach()),
                   "smooth": float(smooth.detach()), "total": float(total.detach())}


def silhouette_carve(cloud: PointCloud, views: list[View]) -> np.ndarray:
    """Keep-mask over points: False where a point projects (in front, inside
    bounds) onto a mask value below 0.5 in ANY view."""
    keep = np.ones(len(cloud), dtype=bool)
    for view in views:
        cam = view.camera
        pix, _, in_front = project(cam, cloud.positions)
        inside = (in_front & (pix[:, 0] >= 0) & (pix[:, 0] < cam.width)
                  & (pix[:, 1] >= 0) & (pix[:, 1] < cam.height))
        if not inside.any():
            continue
        vals = bilinear(view.mask, pix[inside])
        bad = np.flatnonzero(inside)[vals < 0.5]
        keep[bad] = False
    return keep


def insert_points(cloud: PointCloud, model: CloudRayModel, grid, views: list[View],
                  n_new: int, cfg: InverseConfig, rng: np.random.Generator):
    """Cast rays from random foreground pixels; append operator-predicted hits.

    Returns (positions (m, 3), colors (m, 3)) with m <= n_new.
    """
    from .raycast import cast_rays
    fg_cache = [np.argwhere(v.mask >= 0.5) for v in views]
    origins, dirs = [], []
    for _ in range(n_new):
        vi = int(rng.integers(len(views)))
        fg = fg_cache[vi]
        if len(fg) == 0:
            continue
        y, x = fg[int(rng.integers(len(fg)))]
        d = _camera_dirs(views[vi].camera, np.array([[x + 0.5, y + 0.5]]))
        origins.append(views[vi].camera.position.copy())
        dirs.append(d[0])
    if not origins:
        return np.zeros((0, 3)), np.zeros((0, 3))
    origins = np.asarray(origins)
    dirs = np.asarray(dirs)
    sh = cast_rays(model, cloud, grid, origins, dirs, QueryConfig(cfg.k, cfg.delta))
    ok = sh.hit
    pts = origins[ok] + sh.t[ok][:, None] * dirs[ok]
    return pts, np.clip(sh.color[ok], 0.0, 1.0)


def optimize(problem: InverseProblem, out_dir=None, progress_hook=None) -> tuple[PointCloud, list[dict]]:
    """SGD on point positions and colors through the frozen operator.

    Colors are projected back to [0, 1] after every step; the grid is rebuilt
    whenever positions move; carving and insertion run every
    ``cfg.carve_every`` iterations.  Returns the refined cloud and the loss
    log.
    """
    cfg = problem.cfg
    model = problem.model
    for p in model.parameters():
        p.requires_grad_(False)
    rng = np.random.default_rng(cfg.seed)
    positions_t = torch.tensor(problem.cloud.positions, dtype=torch.float32,
                               requires_grad=True)
    colors_t = torch.tensor(np.clip(problem.cloud.colors, 0.0, 1.0),
                            dtype=torch.float32, requires_grad=True)
    qcfg = QueryConfig(cfg.k, cfg.delta)
    log: list[dict] = []
    writer = None
    fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "inverse_metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "points", "color", "hit", "smooth", "total"])
    try:
        for step in range(1, cfg.iterations + 1):
            positions = positions_t.detach().numpy().astype(np.float64)
            colors = colors_t.detach().numpy().astype(np.float64)
            cloud = PointCloud(positions.copy(), colors.copy())
            grid = build_grid(cloud)
            pidx = int(rng.integers(len(cloud)))
            bundle = build_patch_bundle(problem.views, positions, pidx, cfg.patch,
                                        cfg.rays_per_iter)
            if bundle is not None:
                nb = query_rays(grid, cloud, bundle.origins, bundle.dirs, qcfg)
                total, breakdown = inverse_loss(model, positions_t, colors_t, nb,
                                                bundle, cfg.normal_smooth_weight)
                if total.requires_grad:
                    if positions_t.grad is not None:
                        positions_t.grad = None
                    if colors_t.grad is not None:
                        colors_t.grad = None
                    total.backward()
                    with torch.no_grad():
                        if positions_t.grad is not None:
                            positions_t -= cfg.lr * positions_t.grad
                        if colors_t.grad is not None:
                            colors_t -= cfg.lr * colors_t.grad
                            colors_t.clamp_(0.0, 1.0)
                row = {"iteration": step, "points": len(cloud), **breakdown}
                log.append(row)
                if writer:
                    writer.writerow([step, len(cloud), breakdown["color"],
                                     breakdown["hit"], breakdown["smooth"],
                                     breakdown["total"]])
                if progress_hook:
                    progress_hook(row)
            if cfg.carve_every and step % cfg.carve_every == 0:
                positions = positions_t.detach().numpy().astype(np.float64)
                colors = np.clip(colors_t.detach().numpy().astype(np.float64), 0.0, 1.0)
                cloud = PointCloud(positions.copy(), colors.copy())
                keep = silhouette_carve(cloud, problem.views)
                cloud = cloud.subset(keep)
                grid = build_grid(cloud) if len(cloud) else None
                n_new = max(1, int(cfg.insert_fraction * len(cloud)))
                if grid is not None:
                    pts, cols = insert_points(cloud, model, grid, problem.views,
                                              n_new, cfg, rng)
                    if len(pts):
                        cloud = cloud.extend(pts, cols)
                positions_t = torch.tensor(cloud.positions, dtype=torch.float32,
                                           requires_grad=True)
                colors_t = torch.tensor(cloud.colors, dtype=torch.float32,
                                        requires_grad=True)
    finally:
        if fh:
            fh.close()
    final = PointCloud(positions_t.detach().numpy().astype(np.float64),
                       np.clip(colors_t.detach().numpy().astype(np.float64), 0.0, 1.0))
    return final, log
