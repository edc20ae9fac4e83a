"""Desk-scale training: procedural scene synthesis, RGBD capture, batch
assembly with feature dropout and random neighborhood size, the optimizer
loop, and evaluation metrics.

Each iteration synthesizes a fresh capture of one mesh from a fixed
procedural pool, casts target rays against the mesh for ground truth, and
takes one Adam step on the operator.  Everything is deterministic given the
seed (single worker), including resumption from checkpoints.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import Camera, camera_rays, look_at
from .cloud import CaptureFeatures, PointCloud
from .grid import NeighborBatch, QueryConfig, build_grid, query_rays
from .mesh import CheckerTexture, Mesh, intersect_rays
from .model import (AdamState, CloudRayModel, LossWeights, ModelConfig, ModelOutput,
                    Schedule, adam_step, init_params, load_checkpoint,
                    save_checkpoint, training_loss, _config_from_dict, _config_to_dict)
from .raycast import cast_rays, gather_batch, run_operator


# ---------------------------------------------------------------------------
# Procedural shapes

def _icosphere(subdivisions: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere vertices and triangles."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        edge_mid: dict = {}
        verts = list(verts)
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in edge_mid:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                edge_mid[key] = len(verts) - 1
            return edge_mid[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(verts)
        faces = np.asarray(new_faces, dtype=np.int64)
    return verts, faces


def _sphere_uv(verts: np.ndarray) -> np.ndarray:
    u = (np.arctan2(verts[:, 1], verts[:, 0]) / (2 * np.pi)) % 1.0
    v = np.arccos(np.clip(verts[:, 2] / np.maximum(np.linalg.norm(verts, axis=1), 1e-12),
                          -1, 1)) / np.pi
    return np.stack([u, v], axis=1)


def _box_mesh(extents: np.ndarray):
    """Axis-aligned box with duplicated corners per face (flat shading)."""
    e = extents / 2.0
    verts, norms, uvs, tris = [], [], [], []
    axes = [(0, 1, 2), (1, 2, 0), (2, 0, 1)]
    for ax, (a, b, c) in enumerate(axes):
        for sign in (-1.0, 1.0):
            base = len(verts)
            n = np.zeros(3)
            n[a] = sign
            for sb, sc in [(-1, -1), (1, -1), (1, 1), (-1, 1)]:
                p = np.zeros(3)
                p[a] = sign * e[a]
                p[b] = sb * e[b]
                p[c] = sc * e[c]
                verts.append(p)
                norms.append(n.copy())
                uvs.append([(sb + 1) / 2, (sc + 1) / 2])
            if sign > 0:
                tris += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
            else:
                tris += [[base, base + 2, base + 1], [base, base + 3, base + 2]]
    return (np.asarray(verts), np.asarray(tris, dtype=np.int64),
            np.asarray(norms), np.asarray(uvs))


def _torus_mesh(major: float, minor: float, nu: int = 48, nv: int = 24):
    iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    u = iu / nu * 2 * np.pi
    v = iv / nv * 2 * np.pi
    cu, su, cv, sv = np.cos(u), np.sin(u), np.cos(v), np.sin(v)
    verts = np.stack([(major + minor * cv) * cu,
                      (major + minor * cv) * su,
                      minor * sv], axis=-1).reshape(-1, 3)
    norms = np.stack([cv * cu, cv * su, sv], axis=-1).reshape(-1, 3)
    uvs = np.stack([iu / nu, iv / nv], axis=-1).reshape(-1, 2)
    tris = []
    for i in range(nu):
        for j in range(nv):
            a = i * nv + j
            b = ((i + 1) % nu) * nv + j
            c = ((i + 1) % nu) * nv + (j + 1) % nv
            d = i * nv + (j + 1) % nv
            tris += [[a, b, c], [a, c, d]]
    return verts, np.asarray(tris, dtype=np.int64), norms, uvs


def _superquadric_from_sphere(verts_unit: np.ndarray, scale: np.ndarray,
                              e1: float, e2: float):
    """Map unit-sphere vertices onto the superquadric implicit surface."""
    def implicit_terms(p):
        x = np.maximum(np.abs(p[:, 0] / scale[0]), 1e-12)
        y = np.maximum(np.abs(p[:, 1] / scale[1]), 1e-12)
        z = np.maximum(np.abs(p[:, 2] / scale[2]), 1e-12)
        inner = x ** (2.0 / e2) + y ** (2.0 / e2)
        return x, y, z, inner, inner ** (e2 / e1) + z ** (2.0 / e1)

    *_, f = implicit_terms(verts_unit)
    pts = verts_unit * (f ** (-e1 / 2.0))[:, None]
    x, y, z, inner, _ = implicit_terms(pts)
    common = (e2 / e1) * inner ** (e2 / e1 - 1.0) * (2.0 / e2)
    gx = common * x ** (2.0 / e2 - 1.0) * np.sign(pts[:, 0]) / scale[0]
    gy = common * y ** (2.0 / e2 - 1.0) * np.sign(pts[:, 1]) / scale[1]
    gz = (2.0 / e1) * z ** (2.0 / e1 - 1.0) * np.sign(pts[:, 2]) / scale[2]
    normals = np.stack([gx, gy, gz], axis=1)
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    return pts, normals


SHAPE_KINDS = ("sphere", "box", "torus", "superquadric", "union")


def generate_shape(seed: int, kind: str = "sphere", detail: int = 3) -> Mesh:
    """Watertight procedural mesh, centered, longest AABB side = 2 units.

    ``detail`` controls tessellation (icosphere subdivisions / torus grid);
    training pools use a coarser level since the mesh itself is the ground
    truth, not the ideal surface it approximates.
    """
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        verts, tris = _icosphere(detail)
        mesh = Mesh(verts, tris, verts.copy(), _sphere_uv(verts))
    elif kind == "box":
        extents = rng.uniform(0.6, 2.0, size=3)
        mesh = Mesh(*_box_mesh(extents))
    elif kind == "torus":
        minor = rng.uniform(0.15, 0.45)
        mesh = Mesh(*_torus_mesh(1.0, minor, nu=16 * detail, nv=8 * detail))
    elif kind == "superquadric":
        verts, tris = _icosphere(detail)
        scale = rng.uniform(0.5, 1.0, size=3)
        e1, e2 = rng.uniform(0.5, 1.5, size=2)
        pts, normals = _superquadric_from_sphere(verts, scale, e1, e2)
        mesh = Mesh(pts, tris, normals, _sphere_uv(verts))
    elif kind == "union":
        a = generate_shape(seed * 2 + 1, str(rng.choice(["sphere", "box"])), detail)
        b = generate_shape(seed * 2 + 2, str(rng.choice(["box", "torus"])), detail)
        offset = rng.uniform(-0.6, 0.6, size=3)
        verts = np.concatenate([a.vertices, b.vertices * 0.7 + offset])
        tris = np.concatenate([a.triangles, b.triangles + len(a.vertices)])
        norms = np.concatenate([a.normals, b.normals])
        uv = np.concatenate([a.uv, b.uv])
        mesh = Mesh(verts, tris, norms, uv)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    mesh = mesh.normalized(2.0)
    colors = rng.uniform(0.1, 0.95, size=(2, 3))
    mesh.texture = CheckerTexture(colors[0], colors[1],
                                  cells=int(rng.integers(4, 13)),
                                  noise=float(rng.uniform(0.0, 0.3)))
    return mesh


def build_shape_pool(kinds, count: int, seed: int, detail: int = 2) -> list[Mesh]:
    rng = np.random.default_rng(seed)
    return [generate_shape(int(rng.integers(1 << 31)), kinds[i % len(kinds)], detail)
            for i in range(count)]


# ---------------------------------------------------------------------------
# Capture

@dataclass
class RGBDImage:
    color: np.ndarray   # (H, W, 3)
    depth: np.ndarray   # (H, W), +inf on miss
    camera: Camera


def sample_cameras(rng: np.random.Generator, n: int, radius_range, lookat_width: float,
                   resolution, fov_deg: float = 60.0) -> list[Camera]:
    """Cameras uniform in a spherical shell, looking at points in a centered box."""
    r0, r1 = radius_range
    cams = []
    for _ in range(n):
        u = rng.random()
        r = (u * (r1 ** 3 - r0 ** 3) + r0 ** 3) ** (1.0 / 3.0)
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        pos = r * v
        target = rng.uniform(-lookat_width / 2, lookat_width / 2, size=3)
        if np.linalg.norm(target - pos) < 1e-6:
            target = target + np.array([0.0, 0.0, 1e-3])
        res = resolution if np.isscalar(resolution) else int(rng.integers(resolution[0],
                                                                          resolution[1] + 1))
        cams.append(look_at(pos, target, res, res, fov_deg))
    return cams


def capture_rgbd(mesh: Mesh, camera: Camera) -> RGBDImage:
    """One mesh intersection per pixel center; unshaded texture color, no AA."""
    origins, dirs = camera_rays(camera)
    hit, t, _, color = intersect_rays(mesh, origins, dirs)
    h, w = camera.height, camera.width
    depth = np.where(hit, t, np.inf).reshape(h, w)
    return RGBDImage(color.reshape(h, w, 3), depth, camera)


def rgbd_to_cloud(images: list[RGBDImage]) -> PointCloud:
    """Unproject every hit pixel; per-point capture features from the camera.

    u/v offsets point to the reconstructed point of the next pixel in x/y and
    are zero when that pixel is a miss or out of bounds.
    """
    pos_all, col_all, cap_all = [], [], []
    for img in images:
        cam = img.camera
        h, w = cam.height, cam.width
        origins, dirs = camera_rays(cam)
        depth = img.depth.reshape(-1)
        hit = np.isfinite(depth)
        if not hit.any():
            continue
        pts = origins + np.where(hit, depth, 0.0)[:, None] * dirs
        pts_grid = pts.reshape(h, w, 3)
        hit_grid = hit.reshape(h, w)
        du = np.zeros((h, w, 3))
        dv = np.zeros((h, w, 3))
        both_x = hit_grid[:, :-1] & hit_grid[:, 1:]
        du[:, :-1][both_x] = (pts_grid[:, 1:] - pts_grid[:, :-1])[both_x]
        both_y = hit_grid[:-1, :] & hit_grid[1:, :]
        dv[:-1, :][both_y] = (pts_grid[1:, :] - pts_grid[:-1, :])[both_y]
        cap = CaptureFeatures(
            ray_dir=dirs[hit],
            du=du.reshape(-1, 3)[hit],
            dv=dv.reshape(-1, 3)[hit],
            cam_axis=np.broadcast_to(cam.optical_axis, (int(hit.sum()), 3)).copy(),
        )
        pos_all.append(pts[hit])
        col_all.append(img.color.reshape(-1, 3)[hit])
        cap_all.append(cap)
    if not pos_all:
        return PointCloud(np.zeros((0, 3)))
    cap = CaptureFeatures(*[np.concatenate([getattr(c, f) for c in cap_all])
                            for f in ("ray_dir", "du", "dv", "cam_axis")])
    return PointCloud(np.concatenate(pos_all), np.concatenate(col_all), cap)


# ---------------------------------------------------------------------------
# Batches and training

@dataclass
class TrainConfig:
    iterations: int = 2000
    input_cameras: int = 30
    target_rays: int = 2500
    k_range: tuple = (12, 200)
    input_resolution: tuple = (30, 300)
    camera_radius: tuple = (0.5, 3.0)
    input_lookat_width: float = 1.0
    target_lookat_width: float = 1.0
    fov_deg: float = 60.0
    feature_dropout_p: float = 0.5
    delta: float = 0.1
    lambda_t: float = 10.0
    peak_lr: float = 1e-4
    warmup: int = 4000
    seed: int = 0
    shape_kinds: tuple = SHAPE_KINDS
    pool_size: int = 48
    shape_detail: int = 2
    checkpoint_every: int = 500
    val_every: int = 500
    val_views: int = 4
    val_resolution: int = 32
    val_k: int = 40
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = _config_from_dict({**_config_to_dict(ModelConfig()), **self.model})
        self.k_range = tuple(self.k_range)
        self.input_resolution = tuple(self.input_resolution)
        self.camera_radius = tuple(self.camera_radius)
        self.shape_kinds = tuple(self.shape_kinds)

    @property
    def target_side(self) -> int:
        return int(round(np.sqrt(self.target_rays)))

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = _config_to_dict(self.model)
        return d

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass
class Batch:
    cloud: PointCloud
    grid: object
    origins: np.ndarray
    dirs: np.ndarray
    gt_hit: np.ndarray
    gt_t: np.ndarray
    gt_normal: np.ndarray
    gt_color: np.ndarray
    k: int


def make_batch(pool: list[Mesh], cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Sample a scene capture, target rays, ground truth, and dropout draws."""
    mesh = pool[int(rng.integers(len(pool)))]
    cams = sample_cameras(rng, cfg.input_cameras, cfg.camera_radius,
                          cfg.input_lookat_width, cfg.input_resolution, cfg.fov_deg)
    cloud = rgbd_to_cloud([capture_rgbd(mesh, c) for c in cams])
    if rng.random() < cfg.feature_dropout_p:
        cloud.drop_colors()
    if rng.random() < cfg.feature_dropout_p:
        cloud.drop_capture()
    side = cfg.target_side
    target_cam = sample_cameras(rng, 1, cfg.camera_radius, cfg.target_lookat_width,
                                side, cfg.fov_deg)[0]
    origins, dirs = camera_rays(target_cam)
    gt_hit, gt_t, gt_normal, gt_color = intersect_rays(mesh, origins, dirs)
    k = int(rng.integers(cfg.k_range[0], cfg.k_range[1] + 1))
    grid = build_grid(cloud) if len(cloud) else None
    return Batch(cloud, grid, origins, dirs, gt_hit, gt_t, gt_normal, gt_color, k)


def batch_loss(model: CloudRayModel, batch: Batch, cfg: TrainConfig,
               train_mode: bool, rng_t: torch.Generator | None):
    """Forward the operator on one batch and compute the training loss.

    Rays with an empty neighborhood cannot be evaluated and are excluded;
    they correspond to the renderer's structural misses.
    """
    qcfg = QueryConfig(k=batch.k, delta=cfg.delta)
    nb = query_rays(batch.grid, batch.cloud, batch.origins, batch.dirs, qcfg)
    rows = np.flatnonzero(nb.counts > 0)
    if len(rows) == 0:
        return None, None, 0
    kmax = max(int(nb.counts[rows].max()), 1)
    sub = NeighborBatch(nb.indices[rows, :kmax], nb.mask[rows, :kmax], nb.counts[rows])
    pos, col, cap, hc, ha, mask = gather_batch(batch.cloud, sub, dtype=torch.float32)
    o_t = torch.from_numpy(batch.origins[rows]).to(torch.float32)
    d_t = torch.from_numpy(batch.dirs[rows]).to(torch.float32)
    out, t_world, n_world, _ = run_operator(model, o_t, d_t, pos, col, cap, hc, ha,
                                            mask, train_mode=train_mode, rng=rng_t)
    pred = ModelOutput(out.hit_prob, t_world, n_world, out.weights)
    gt_hit = torch.from_numpy(batch.gt_hit[rows])
    gt_t = torch.from_numpy(np.where(batch.gt_hit, batch.gt_t, 0.0)[rows]).to(torch.float32)
    gt_n = torch.from_numpy(batch.gt_normal[rows]).to(torch.float32)
    gt_c = torch.from_numpy(batch.gt_color[rows]).to(torch.float32)
    total, breakdown = training_loss(pred, gt_hit, gt_t, gt_n, gt_c, col,
                                     LossWeights(cfg.lambda_t))
    return total, breakdown, len(rows)


# ---------------------------------------------------------------------------
# Metrics

def psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return 99.0
    return min(99.0, 10.0 * np.log10(1.0 / mse))


def compute_metrics(pred_hit, pred_depth, pred_normal, pred_color,
                    gt_hit, gt_depth, gt_normal, gt_color) -> dict:
    """Depth RMSE / normal angle on agreed-hit rays, hit accuracy, PSNR.

    Color images are composited on white where each side misses; normals are
    compared after orienting both against the viewing convention (sign-blind).
    """
    pred_hit = np.asarray(pred_hit, dtype=bool).ravel()
    gt_hit = np.asarray(gt_hit, dtype=bool).ravel()
    both = pred_hit & gt_hit
    out = {"hit_accuracy": float((pred_hit == gt_hit).mean() * 100.0)}
    if both.any():
        d = np.asarray(pred_depth).ravel()[both] - np.asarray(gt_depth).ravel()[both]
        out["depth_rmse"] = float(np.sqrt((d ** 2).mean()))
        pn = np.asarray(pred_normal).reshape(-1, 3)[both]
        gn = np.asarray(gt_normal).reshape(-1, 3)[both]
        dots = np.abs(np.einsum("ij,ij->i", pn, gn))
        angles = np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))
        out["normal_angle_deg"] = float(angles.mean())
    else:
        out["depth_rmse"] = float("inf")
        out["normal_angle_deg"] = float("inf")
    pc = np.where(pred_hit[:, None], np.asarray(pred_color).reshape(-1, 3), 1.0)
    gc = np.where(gt_hit[:, None], np.asarray(gt_color).reshape(-1, 3), 1.0)
    mse = float(((pc - gc) ** 2).mean())
    out["psnr_db"] = psnr_from_mse(mse)
    return out


def evaluate(model: CloudRayModel, mesh: Mesh, cloud: PointCloud, cameras, qcfg) -> dict:
    """Render each camera with the operator and compare against mesh ground truth."""
    grid = build_grid(cloud)
    agg = []
    for cam in cameras:
        origins, dirs = camera_rays(cam)
        gt_hit, gt_t, gt_normal, gt_color = intersect_rays(mesh, origins, dirs)
        sh = cast_rays(model, cloud, grid, origins, dirs, qcfg)
        hit = sh.hit
        agg.append(compute_metrics(hit, sh.t, sh.normal, sh.color,
                                   gt_hit, gt_t, gt_normal, gt_color))
    return {k: float(np.mean([m[k] for m in agg])) for k in agg[0]}


# ---------------------------------------------------------------------------
# The training loop

def _save_train_state(path: Path, state: AdamState, step: int,
                      np_rng: np.random.Generator, torch_rng: torch.Generator) -> None:
    moments = {}
    for tag, table in (("m", state.m), ("v", state.v)):
        for name, tensor in table.items():
            moments[f"{tag}.{name}"] = tensor.numpy()
    np.savez(path.with_suffix(".moments.npz"), **moments)
    meta = {
        "step": step,
        "numpy_rng": np_rng.bit_generator.state,
        "torch_rng": torch_rng.get_state().numpy().tobytes().hex(),
    }
    with open(path.with_suffix(".state.json"), "w") as fh:
        json.dump(meta, fh)


def _load_train_state(path: Path, model: CloudRayModel):
    data = np.load(path.with_suffix(".moments.npz"))
    state = AdamState.for_model(model)
    for name in state.m:
        state.m[name] = torch.from_numpy(data[f"m.{name}"])
        state.v[name] = torch.from_numpy(data[f"v.{name}"])
    with open(path.with_suffix(".state.json")) as fh:
        meta = json.load(fh)
    np_rng = np.random.default_rng()
    np_rng.bit_generator.state = meta["numpy_rng"]
    torch_rng = torch.Generator()
    torch_rng.set_state(torch.from_numpy(
        np.frombuffer(bytes.fromhex(meta["torch_rng"]), dtype=np.uint8).copy()))
    return state, meta["step"], np_rng, torch_rng


def train(cfg: TrainConfig, out_dir, resume: str | None = None,
          log_hook=None) -> tuple[CloudRayModel, list[dict]]:
    """Run the optimization loop; writes metrics.csv and checkpoints to out_dir.

    Returns the trained model and the per-iteration log.  ``resume`` names a
    checkpoint stem written by a previous run; optimizer moments and RNG
    states are restored so the continued loss trajectory is bitwise identical
    to an uninterrupted run (single worker).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pool = build_shape_pool(cfg.shape_kinds, cfg.pool_size, cfg.seed + 7919,
                            cfg.shape_detail)
    val_pool = build_shape_pool(cfg.shape_kinds, max(2, len(cfg.shape_kinds)),
                                cfg.seed + 104729, cfg.shape_detail)
    schedule = Schedule(peak_lr=cfg.peak_lr, warmup=cfg.warmup)
    if resume:
        model = load_checkpoint(str(resume) + ".ckpt")
        adam, start, np_rng, torch_rng = _load_train_state(Path(resume), model)
    else:
        model = init_params(cfg.model, cfg.seed)
        adam = AdamState.for_model(model)
        start = 0
        np_rng = np.random.default_rng(cfg.seed)
        torch_rng = torch.Generator().manual_seed(cfg.seed + 1)
    weights = LossWeights(cfg.lambda_t)
    log: list[dict] = []
    csv_path = out / "metrics.csv"
    csv_mode = "a" if resume and csv_path.exists() else "w"
    with open(csv_path, csv_mode, newline="") as fh:
        writer = csv.writer(fh)
        if csv_mode == "w":
            writer.writerow(["iteration", "lr", "loss", "t", "normal", "color", "bce",
                             "rays", "val_depth_rmse", "val_normal_deg",
                             "val_hit_acc", "val_psnr"])
        for step in range(start + 1, cfg.iterations + 1):
            batch = make_batch(pool, cfg, np_rng)
            total, breakdown, nrays = batch_loss(model, batch, cfg, True, torch_rng)
            if total is None:
                writer.writerow([step, 0.0, "", "", "", "", "", 0, "", "", "", ""])
                continue
            model.zero_grad(set_to_none=True)
            total.backward()
            lr = adam_step(model, adam, step, schedule)
            if not np.isfinite(breakdown["total"]):
                raise FloatingPointError(f"non-finite loss at iteration {step}")
            row: dict = {"iteration": step, "lr": lr, "rays": nrays, **breakdown}
            val = [""] * 4
            if cfg.val_every and (step % cfg.val_every == 0 or step == cfg.iterations):
                vm = validate(model, val_pool, cfg)
                row.update(vm)
                val = [vm["depth_rmse"], vm["normal_angle_deg"],
                       vm["hit_accuracy"], vm["psnr_db"]]
            writer.writerow([step, lr, breakdown["total"], breakdown["t"],
                             breakdown["normal"], breakdown["color"],
                             breakdown["bce"], nrays, *val])
            log.append(row)
            if log_hook:
                log_hook(row)
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                stem = out / f"iter_{step:06d}"
                save_checkpoint(model, str(stem) + ".ckpt")
                _save_train_state(stem, adam, step, np_rng, torch_rng)
    save_checkpoint(model, out / "final.ckpt")
    _save_train_state(out / "final", adam, cfg.iterations, np_rng, torch_rng)
    return model, log


def validate(model: CloudRayModel, val_pool: list[Mesh], cfg: TrainConfig) -> dict:
    """Held-out metrics on fixed seeded scenes."""
    rng = np.random.default_rng(cfg.seed + 424242)
    agg = []
    qcfg = QueryConfig(k=cfg.val_k, delta=cfg.delta)
    with torch.no_grad():
        for mesh in val_pool[:2]:
            cams = sample_cameras(rng, 6, cfg.camera_radius, cfg.input_lookat_width,
                                  48, cfg.fov_deg)
            cloud = rgbd_to_cloud([capture_rgbd(mesh, c) for c in cams])
            val_cams = sample_cameras(rng, cfg.val_views, cfg.camera_radius,
                                      cfg.target_lookat_width, cfg.val_resolution,
                                      cfg.fov_deg)
            agg.append(evaluate(model, mesh, cloud, val_cams, qcfg))
    return {k: float(np.mean([m[k] for m in agg])) for k in agg[0]}
