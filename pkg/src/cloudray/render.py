"""Rendering: image-based rendering, deferred shading, and path tracing.

The learned operator serves as the scene-intersection primitive for point
clouds, side by side with closed-form analytic primitives.  Specular shading
is Cook-Torrance (GGX distribution, Smith geometry, Schlick Fresnel) with the
split-sum approximation against the environment; path tracing samples one
continuation per vertex (cosine for diffuse, GGX half-vector for specular)
with counter-based per-(pixel, sample, bounce) random streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as crng
from .camera import Camera, camera_rays
from .cloud import PointCloud, load_ply
from .grid import QueryConfig, VoxelGrid, build_grid, reset_cost_counters
from .imgio import load_png
from .model import CloudRayModel
from .raycast import SurfaceHit, cast_rays

OFFSET = 1e-4            # continuation-ray offset along the shading normal
MIRROR_ROUGHNESS = 1e-3  # below this, specular uses the exact mirror branch

MATERIAL_VECTOR_FIELDS = ("albedo", "kbase", "roughness", "metallic", "specular",
                          "emission")  # 3+1+1+1+1+3 = 10 floats


@dataclass(frozen=True)
class Material:
    """Surface description; ``mode`` selects which fields are active.

    rgb mode is plain Lambertian with ``rgb`` as albedo.  cook-torrance mode
    uses base color kbase*albedo: diffuse = base*(1-metallic) and
    F0 = mix(0.08*specular, base, metallic).  Emission applies in both modes.
    """

    mode: str = "rgb"
    rgb: tuple = (0.7, 0.7, 0.7)
    albedo: tuple = (1.0, 1.0, 1.0)
    kbase: float = 0.5
    roughness: float = 0.5
    metallic: float = 0.0
    specular: float = 0.5
    emission: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.mode not in ("rgb", "cook-torrance"):
            raise ValueError(f"unknown material mode {self.mode!r}")

    def diffuse_color(self) -> np.ndarray:
        if self.mode == "rgb":
            return np.asarray(self.rgb, dtype=np.float64)
        base = self.kbase * np.asarray(self.albedo, dtype=np.float64)
        return base * (1.0 - self.metallic)

    def f0(self) -> np.ndarray:
        if self.mode == "rgb":
            return np.zeros(3)
        base = self.kbase * np.asarray(self.albedo, dtype=np.float64)
        plastic = 0.08 * self.specular * np.ones(3)
        return plastic * (1.0 - self.metallic) + base * self.metallic

    def vector(self) -> np.ndarray:
        """Blendable 10-float coefficient vector (cook-torrance fields)."""
        return np.concatenate([np.asarray(self.albedo, dtype=np.float64),
                               [self.kbase, self.roughness, self.metallic, self.specular],
                               np.asarray(self.emission, dtype=np.float64)])

    @staticmethod
    def from_json(data) -> "Material":
        fields_ = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()
                   if k != "name"}
        return Material(**fields_)


def material_table(vec: np.ndarray):
    """Split blended material vectors (B, 10) into shading quantities."""
    albedo = vec[:, 0:3]
    kbase = vec[:, 3:4]
    roughness = vec[:, 4]
    metallic = vec[:, 5:6]
    specular = vec[:, 6:7]
    emission = vec[:, 7:10]
    base = kbase * albedo
    diffuse = base * (1.0 - metallic)
    f0 = 0.08 * specular * (1.0 - metallic) + base * metallic
    return diffuse, f0, roughness, emission


class Environment:
    def sample(self, dirs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diffuse_irradiance(self, normals: np.ndarray) -> np.ndarray:
        """Cosine-weighted irradiance / pi (equals radiance for constant maps)."""
        raise NotImplementedError

    def prefiltered(self, dirs: np.ndarray, roughness: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class ConstantEnvironment(Environment):
    radiance: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.radiance = np.asarray(self.radiance, dtype=np.float64).reshape(3)

    def sample(self, dirs):
        return np.broadcast_to(self.radiance, (len(dirs), 3)).copy()

    def diffuse_irradiance(self, normals):
        return np.broadcast_to(self.radiance, (len(normals), 3)).copy()

    def prefiltered(self, dirs, roughness):
        return np.broadcast_to(self.radiance, (len(dirs), 3)).copy()


class ImageEnvironment(Environment):
    """Lat-long radiance map with box-filtered mips for the split-sum prefilter."""

    def __init__(self, image: np.ndarray):
        img = np.asarray(image, dtype=np.float64)
        self.mips = [img]
        while min(self.mips[-1].shape[:2]) > 2:
            m = self.mips[-1]
            h, w = m.shape[0] // 2 * 2, m.shape[1] // 2 * 2
            m = m[:h, :w]
            self.mips.append(0.25 * (m[0::2, 0::2] + m[1::2, 0::2]
                                     + m[0::2, 1::2] + m[1::2, 1::2]))
        self._irradiance = self._build_irradiance()

    def _lookup(self, img, dirs):
        h, w = img.shape[:2]
        u = (np.arctan2(dirs[:, 1], dirs[:, 0]) / (2 * np.pi) + 0.5) % 1.0
        v = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0)) / np.pi
        x = np.clip((u * w).astype(np.int64), 0, w - 1)
        y = np.clip((v * h).astype(np.int64), 0, h - 1)
        return img[y, x]

    def _build_irradiance(self, out_h: int = 16):
        src = self.mips[min(2, len(self.mips) - 1)]
        h, w = src.shape[:2]
        theta = (np.arange(h) + 0.5) / h * np.pi
        phi = (np.arange(w) + 0.5) / w * 2 * np.pi - np.pi
        st, ct = np.sin(theta), np.cos(theta)
        dirs = np.stack(np.broadcast_arrays(
            st[:, None] * np.cos(phi)[None, :],
            st[:, None] * np.sin(phi)[None, :],
            ct[:, None] * np.ones_like(phi)[None, :]), axis=-1).reshape(-1, 3)
        domega = (np.pi / h) * (2 * np.pi / w) * np.repeat(st, w)
        radiance = src.reshape(-1, 3)
        out_w = out_h * 2
        theta_o = (np.arange(out_h) + 0.5) / out_h * np.pi
        phi_o = (np.arange(out_w) + 0.5) / out_w * 2 * np.pi - np.pi
        sto, cto = np.sin(theta_o), np.cos(theta_o)
        normals = np.stack(np.broadcast_arrays(
            sto[:, None] * np.cos(phi_o)[None, :],
            sto[:, None] * np.sin(phi_o)[None, :],
            cto[:, None] * np.ones_like(phi_o)[None, :]), axis=-1).reshape(-1, 3)
        cosines = np.clip(normals @ dirs.T, 0.0, None)
        irr = (cosines * domega[None, :]) @ radiance / np.pi
        return irr.reshape(out_h, out_w, 3)

    def sample(self, dirs):
        return self._lookup(self.mips[0], dirs)

    def diffuse_irradiance(self, normals):
        return self._lookup(self._irradiance, normals)

    def prefiltered(self, dirs, roughness):
        roughness = np.broadcast_to(np.asarray(roughness, dtype=np.float64), (len(dirs),))
        level = np.clip(np.round(roughness * (len(self.mips) - 1)).astype(np.int64),
                        0, len(self.mips) - 1)
        out = np.zeros((len(dirs), 3))
        for lv in np.unique(level):
            sel = level == lv
            out[sel] = self._lookup(self.mips[lv], dirs[sel])
        return out


@dataclass
class AnalyticPrimitive:
    material: Material

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Returns (t (B,), normal (B, 3)); t = +inf on miss."""
        raise NotImplementedError


@dataclass
class Plane(AnalyticPrimitive):
    point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)

    def intersect(self, origins, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origins) @ self.normal) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 1e-9), t, np.inf)
        normal = np.where((denom < 0)[:, None], self.normal, -self.normal)
        return t, normal


@dataclass
class Sphere(AnalyticPrimitive):
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")

    def intersect(self, origins, dirs):
        oc = origins - self.center
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - root
        t1 = -b + root
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where((disc >= 0) & (t > 1e-9), t, np.inf)
        p = origins + t[:, None] * dirs
        normal = np.where(np.isfinite(t)[:, None], (p - self.center) / self.radius, 0.0)
        return t, normal


@dataclass
class Rectangle(AnalyticPrimitive):
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    edge_u: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    edge_v: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.edge_u = np.asarray(self.edge_u, dtype=np.float64)
        self.edge_v = np.asarray(self.edge_v, dtype=np.float64)
        n = np.cross(self.edge_u, self.edge_v)
        self._normal = n / np.linalg.norm(n)

    def intersect(self, origins, dirs):
        denom = dirs @ self._normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.origin - origins) @ self._normal) / denom
        p = origins + t[:, None] * dirs
        rel = p - self.origin
        su = (rel @ self.edge_u) / (self.edge_u @ self.edge_u)
        sv = (rel @ self.edge_v) / (self.edge_v @ self.edge_v)
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (su >= 0) & (su <= 1) & (sv >= 0) & (sv <= 1)
        t = np.where(ok, t, np.inf)
        normal = np.where((denom < 0)[:, None], self._normal, -self._normal)
        return t, normal


@dataclass
class Scene:
    cloud: PointCloud | None = None
    grid: VoxelGrid | None = None
    analytic: list = field(default_factory=list)
    environment: Environment = field(default_factory=lambda: ConstantEnvironment(np.zeros(3)))
    cloud_mode: str = "rgb"   # how cloud hits shade: per-point colors or materials

    def __post_init__(self):
        if self.cloud is None and not self.analytic:
            raise ValueError("scene needs a cloud or at least one analytic primitive")
        if self.cloud is not None and self.grid is None:
            self.grid = build_grid(self.cloud)


@dataclass
class HitBatch:
    """Merged nearest-hit record over cloud and analytic sources.

    ``source`` is -1 for miss, 0 for the cloud, 1 + index for analytic
    primitives.  Material fields are blended per ray for cloud hits.
    """

    hit: np.ndarray
    t: np.ndarray
    normal: np.ndarray
    source: np.ndarray
    diffuse: np.ndarray
    f0: np.ndarray
    roughness: np.ndarray
    emission: np.ndarray
    cloud_result: SurfaceHit | None = None


def blend_color(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Convex combination of per-neighbor records: (B, K) x (B, K, C) -> (B, C)."""
    return (weights[..., None] * values).sum(axis=-2)


def intersect(scene: Scene, model: CloudRayModel | None, origins: np.ndarray,
              dirs: np.ndarray, cfg: QueryConfig) -> HitBatch:
    """Nearest hit among the learned cloud operator and analytic primitives."""
    b = len(origins)
    out = HitBatch(
        hit=np.zeros(b, dtype=bool),
        t=np.full(b, np.inf),
        normal=np.zeros((b, 3)),
        source=np.full(b, -1, dtype=np.int64),
        diffuse=np.zeros((b, 3)),
        f0=np.zeros((b, 3)),
        roughness=np.ones(b),
        emission=np.zeros((b, 3)),
    )
    if scene.cloud is not None and model is not None:
        sh = cast_rays(model, scene.cloud, scene.grid, origins, dirs, cfg)
        out.cloud_result = sh
        hit = sh.hit
        out.hit |= hit
        out.t = np.where(hit, sh.t, np.inf)
        out.normal = np.where(hit[:, None], sh.normal, 0.0)
        out.source = np.where(hit, 0, -1)
        if scene.cloud_mode == "cook-torrance" and scene.cloud.materials is not None:
            vec = blend_color(sh.weights, scene.cloud.materials[np.maximum(sh.indices, 0)])
            diffuse, f0, roughness, emission = material_table(vec)
            out.diffuse = np.where(hit[:, None], diffuse, 0.0)
            out.f0 = np.where(hit[:, None], f0, 0.0)
            out.roughness = np.where(hit, roughness, 1.0)
            out.emission = np.where(hit[:, None], emission, 0.0)
        else:
            out.diffuse = np.where(hit[:, None], sh.color, 0.0)
    for i, prim in enumerate(scene.analytic):
        t, normal = prim.intersect(origins, dirs)
        closer = t < out.t
        if not closer.any():
            continue
        out.hit |= closer
        out.t = np.where(closer, t, out.t)
        out.normal = np.where(closer[:, None], normal, out.normal)
        out.source = np.where(closer, 1 + i, out.source)
        m = prim.material
        out.diffuse = np.where(closer[:, None], m.diffuse_color(), out.diffuse)
        out.f0 = np.where(closer[:, None], m.f0(), out.f0)
        rough = m.roughness if m.mode == "cook-torrance" else 1.0
        out.roughness = np.where(closer, rough, out.roughness)
        out.emission = np.where(closer[:, None], np.asarray(m.emission, dtype=np.float64),
                                out.emission)
    # Face normals against the incoming ray.
    flip = np.einsum("ij,ij->i", out.normal, dirs) > 0
    out.normal = np.where(flip[:, None], -out.normal, out.normal)
    return out


def ggx_d(nh: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    a2 = alpha ** 2
    denom = nh ** 2 * (a2 - 1.0) + 1.0
    return a2 / np.maximum(np.pi * denom ** 2, 1e-12)


def smith_g1(nx: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    a2 = alpha ** 2
    return 2.0 * nx / np.maximum(nx + np.sqrt(a2 + (1.0 - a2) * nx ** 2), 1e-12)


def fresnel_schlick(vh: np.ndarray, f0: np.ndarray) -> np.ndarray:
    return f0 + (1.0 - f0) * (1.0 - np.clip(vh, 0.0, 1.0))[..., None] ** 5


def shade_cook_torrance(normal, view, light, diffuse, f0, roughness):
    """BRDF * cos(theta_light) for one light sample (all arrays (B, .))."""
    nl = np.einsum("ij,ij->i", normal, light)
    nv = np.einsum("ij,ij->i", normal, view)
    facing = (nl > 0) & (nv > 0)
    h = light + view
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    nh = np.clip(np.einsum("ij,ij->i", normal, h), 0.0, 1.0)
    vh = np.clip(np.einsum("ij,ij->i", view, h), 0.0, 1.0)
    alpha = np.maximum(roughness ** 2, 1e-4)
    d = ggx_d(nh, alpha)
    g = smith_g1(np.clip(nl, 1e-6, 1.0), alpha) * smith_g1(np.clip(nv, 1e-6, 1.0), alpha)
    f = fresnel_schlick(vh, f0)
    spec = f * (d * g / np.maximum(4.0 * nv * nl, 1e-9))[:, None]
    lambertian = diffuse / np.pi
    out = (lambertian + spec) * np.clip(nl, 0.0, None)[:, None]
    return np.where(facing[:, None], out, 0.0)


def env_brdf(f0: np.ndarray, roughness: np.ndarray, nv: np.ndarray) -> np.ndarray:
    """Analytic split-sum BRDF integration (Karis's mobile approximation).

    The grazing term is gated by 50*max(f0) so f0 = 0 yields exactly zero
    specular, keeping the Lambertian reduction exact.
    """
    c0 = np.array([-1.0, -0.0275, -0.572, 0.022])
    c1 = np.array([1.0, 0.0425, 1.04, -0.04])
    r = roughness[:, None] * c0 + c1
    a004 = np.minimum(r[:, 0] ** 2, np.exp2(-9.28 * np.clip(nv, 0.0, 1.0))) * r[:, 0] + r[:, 1]
    a = -1.04 * a004 + r[:, 2]
    b = 1.04 * a004 + r[:, 3]
    gate = np.minimum(1.0, 50.0 * f0.max(axis=-1))
    return f0 * a[:, None] + (b * gate)[:, None]


def reflect(dirs: np.ndarray, normal: np.ndarray) -> np.ndarray:
    return dirs - 2.0 * np.einsum("ij,ij->i", dirs, normal)[:, None] * normal


def shade_deferred(hits: HitBatch, environment: Environment, view_dirs: np.ndarray,
                   incoming: np.ndarray) -> np.ndarray:
    """Single-bounce shading against the environment (no secondary visibility).

    ``view_dirs`` points from the surface toward the viewer; ``incoming`` is
    the ray direction that produced the hits.
    """
    b = len(view_dirs)
    radiance = np.zeros((b, 3))
    hit = hits.hit
    if not hit.any():
        return radiance
    n = hits.normal
    radiance[hit] += hits.emission[hit]
    radiance[hit] += hits.diffuse[hit] * environment.diffuse_irradiance(n[hit])
    f0 = hits.f0
    has_spec = hit & (f0.max(axis=-1) > 0)
    if has_spec.any():
        sel = has_spec
        refl = reflect(incoming[sel], n[sel])
        nv = np.clip(np.einsum("ij,ij->i", n[sel], view_dirs[sel]), 0.0, 1.0)
        mirror = hits.roughness[sel] < MIRROR_ROUGHNESS
        pre = environment.prefiltered(refl, hits.roughness[sel])
        factor = env_brdf(f0[sel], hits.roughness[sel], nv)
        factor[mirror] = fresnel_schlick(nv[mirror], f0[sel][mirror])
        radiance[sel] += pre * factor
    return radiance


@dataclass
class RenderOutput:
    color: np.ndarray    # (H, W, 3) linear radiance
    depth: np.ndarray    # (H, W), +inf on miss
    normal: np.ndarray   # (H, W, 3), zeros on miss
    hit: np.ndarray      # (H, W) bool
    aux: dict = field(default_factory=dict)


def render_image(scene: Scene, camera: Camera, model: CloudRayModel | None,
                 cfg: QueryConfig, spp: int = 1, seed: int = 0) -> RenderOutput:
    """Image-based rendering: one operator query per camera ray.

    Color comes from the blending weights (or analytic material albedo);
    depth/normal/hit always come from the pixel-center ray; spp > 1 averages
    jittered sub-pixel rays for color only.  Misses show the environment.
    """
    if spp < 1:
        raise ValueError("spp must be at least 1")
    reset_cost_counters()
    h, w = camera.height, camera.width
    origins, dirs = camera_rays(camera)
    hits = intersect(scene, model, origins, dirs, cfg)
    color_accum = _ibr_color(scene, hits, dirs)
    if spp > 1:
        pixel_ids = np.arange(h * w)
        for s in range(1, spp):
            jitter = np.stack([crng.uniform(seed, pixel_ids, np.full(h * w, s), np.zeros(h * w)),
                               crng.uniform(seed, pixel_ids, np.full(h * w, s), np.ones(h * w))],
                              axis=1)
            o_j, d_j = camera_rays(camera, jitter)
            color_accum += _ibr_color(scene, intersect(scene, model, o_j, d_j, cfg), d_j)
        color_accum /= spp
    counts = None
    if hits.cloud_result is not None:
        counts = (hits.cloud_result.indices >= 0).sum(axis=1).reshape(h, w)
    return RenderOutput(
        color=color_accum.reshape(h, w, 3),
        depth=np.where(hits.hit, hits.t, np.inf).reshape(h, w),
        normal=hits.normal.reshape(h, w, 3),
        hit=hits.hit.reshape(h, w),
        aux={} if counts is None else {"neighbor_counts": counts},
    )


def _ibr_color(scene: Scene, hits: HitBatch, dirs: np.ndarray) -> np.ndarray:
    color = np.where(hits.hit[:, None], hits.diffuse + hits.emission, 0.0)
    miss = ~hits.hit
    if miss.any():
        color[miss] = scene.environment.sample(dirs[miss])
    return color


def render_deferred(scene: Scene, camera: Camera, model: CloudRayModel | None,
                    cfg: QueryConfig) -> RenderOutput:
    """One intersection per pixel, shaded against the environment."""
    reset_cost_counters()
    h, w = camera.height, camera.width
    origins, dirs = camera_rays(camera)
    hits = intersect(scene, model, origins, dirs, cfg)
    radiance = shade_deferred(hits, scene.environment, -dirs, dirs)
    miss = ~hits.hit
    if miss.any():
        radiance[miss] = scene.environment.sample(dirs[miss])
    return RenderOutput(radiance.reshape(h, w, 3),
                        np.where(hits.hit, hits.t, np.inf).reshape(h, w),
                        hits.normal.reshape(h, w, 3), hits.hit.reshape(h, w))


def _orthonormal_basis(n: np.ndarray):
    s = np.where(n[:, 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (s + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t1 = np.stack([1.0 + s * n[:, 0] ** 2 * a, s * b, -s * n[:, 0]], axis=1)
    t2 = np.stack([b, s + n[:, 1] ** 2 * a, -n[:, 1]], axis=1)
    return t1, t2


def _luminance(c: np.ndarray) -> np.ndarray:
    return 0.2126 * c[..., 0] + 0.7152 * c[..., 1] + 0.0722 * c[..., 2]


def path_trace(scene: Scene, camera: Camera, model: CloudRayModel | None,
               cfg: QueryConfig, bounces: int = 4, spp: int = 2000,
               seed: int = 0) -> np.ndarray:
    """Iterative path tracer; returns (H, W, 3) linear radiance.

    Fixed bounce count, no next-event estimation.  Every random draw is a
    pure function of (seed, pixel, sample, bounce, dim), so the result is
    independent of batching and worker count.
    """
    if bounces < 1:
        raise ValueError("bounces must be at least 1")
    reset_cost_counters()
    h, w = camera.height, camera.width
    npix = h * w
    pixel_ids = np.arange(npix)
    accum = np.zeros((npix, 3))
    for s in range(spp):
        skey = np.full(npix, s)
        jitter = np.stack([crng.uniform(seed, pixel_ids, skey, np.full(npix, 0)),
                           crng.uniform(seed, pixel_ids, skey, np.full(npix, 1))], axis=1)
        origins, dirs = camera_rays(camera, jitter)
        throughput = np.ones((npix, 3))
        alive = np.ones(npix, dtype=bool)
        for b in range(bounces):
            rows = np.flatnonzero(alive)
            if len(rows) == 0:
                break
            hits = intersect(scene, model, origins[rows], dirs[rows], cfg)
            miss = ~hits.hit
            if miss.any():
                mrows = rows[miss]
                accum[mrows] += throughput[mrows] * scene.environment.sample(dirs[mrows])
                alive[mrows] = False
            if not hits.hit.any():
                break
            hrows = rows[hits.hit]
            n = hits.normal[hits.hit]
            p = origins[hrows] + hits.t[hits.hit][:, None] * dirs[hrows]
            accum[hrows] += throughput[hrows] * hits.emission[hits.hit]
            if b == bounces - 1:
                alive[hrows] = False
                break
            diffuse = hits.diffuse[hits.hit]
            f0 = hits.f0[hits.hit]
            rough = hits.roughness[hits.hit]
            view = -dirs[hrows]
            lum_s = _luminance(f0)
            lum_d = _luminance(diffuse)
            p_spec = np.where(lum_s + lum_d > 0, lum_s / np.maximum(lum_s + lum_d, 1e-12), 0.0)
            bkey = np.full(len(hrows), b)
            sk = np.full(len(hrows), s)
            u_branch = crng.uniform(seed, hrows, sk, bkey, np.full(len(hrows), 2))
            u1 = crng.uniform(seed, hrows, sk, bkey, np.full(len(hrows), 3))
            u2 = crng.uniform(seed, hrows, sk, bkey, np.full(len(hrows), 4))
            take_spec = u_branch < p_spec
            new_dir = np.zeros((len(hrows), 3))
            weight = np.zeros((len(hrows), 3))
            if (~take_spec).any():
                sel = ~take_spec
                t1, t2 = _orthonormal_basis(n[sel])
                r = np.sqrt(u1[sel])
                phi = 2 * np.pi * u2[sel]
                local = np.stack([r * np.cos(phi), r * np.sin(phi), np.sqrt(1.0 - u1[sel])], axis=1)
                new_dir[sel] = (local[:, 0:1] * t1 + local[:, 1:2] * t2
                                + local[:, 2:3] * n[sel])
                weight[sel] = diffuse[sel] / np.maximum(1.0 - p_spec[sel], 1e-12)[:, None]
            if take_spec.any():
                sel = take_spec
                nv = np.clip(np.einsum("ij,ij->i", n[sel], view[sel]), 1e-6, 1.0)
                mirror = rough[sel] < MIRROR_ROUGHNESS
                alpha = np.maximum(rough[sel] ** 2, 1e-6)
                t1, t2 = _orthonormal_basis(n[sel])
                cos_h = np.sqrt(np.clip((1.0 - u1[sel]) / (1.0 + (alpha ** 2 - 1.0) * u1[sel]),
                                        0.0, 1.0))
                sin_h = np.sqrt(np.clip(1.0 - cos_h ** 2, 0.0, 1.0))
                phi = 2 * np.pi * u2[sel]
                h_vec = (sin_h * np.cos(phi))[:, None] * t1 \
                    + (sin_h * np.sin(phi))[:, None] * t2 + cos_h[:, None] * n[sel]
                h_vec = np.where(mirror[:, None], n[sel], h_vec)
                vh = np.clip(np.einsum("ij,ij->i", view[sel], h_vec), 0.0, 1.0)
                ldir = 2.0 * vh[:, None] * h_vec - view[sel]
                nl = np.einsum("ij,ij->i", n[sel], ldir)
                valid = nl > 1e-6
                f = fresnel_schlick(vh, f0[sel])
                g = smith_g1(np.clip(nl, 1e-6, 1.0), alpha) * smith_g1(nv, alpha)
                nh = np.clip(np.einsum("ij,ij->i", n[sel], h_vec), 1e-6, 1.0)
                w_spec = f * (g * vh / np.maximum(nv * nh, 1e-9))[:, None]
                w_spec = np.where(mirror[:, None], fresnel_schlick(nv, f0[sel]), w_spec)
                w_spec = np.where(valid[:, None] | mirror[:, None], w_spec, 0.0)
                new_dir[sel] = np.where(mirror[:, None], reflect(dirs[hrows][sel], n[sel]), ldir)
                weight[sel] = w_spec / np.maximum(p_spec[sel], 1e-12)[:, None]
            throughput[hrows] *= weight
            origins[hrows] = p + OFFSET * n
            dirs[hrows] = new_dir / np.maximum(np.linalg.norm(new_dir, axis=1, keepdims=True), 1e-12)
            dead = hrows[np.max(np.abs(weight), axis=1) <= 0.0]
            alive[dead] = False
    return (accum / spp).reshape(h, w, 3)


def scene_from_json(data: dict, base_dir=".") -> Scene:
    """Build a scene from its JSON description (paths relative to base_dir)."""
    base = Path(base_dir)
    named = {m["name"]: Material.from_json(m) for m in data.get("materials", [])}

    def resolve(spec) -> Material:
        if spec is None:
            return Material()
        if isinstance(spec, str):
            return named[spec]
        if "ref" in spec:
            return named[spec["ref"]]
        return Material.from_json(spec)

    cloud = None
    cloud_mode = "rgb"
    if data.get("cloud"):
        cloud = load_ply(base / data["cloud"])
        cm = data.get("cloud_material")
        if cm is not None:
            mat = resolve(cm)
            if mat.mode == "cook-torrance":
                cloud_mode = "cook-torrance"
                vec = mat.vector()
                mats = np.tile(vec, (len(cloud), 1))
                if cloud.has_color.any():
                    mats[:, 0:3] = cloud.colors  # per-point albedo from colors
                cloud.materials = mats
    analytic = []
    for prim in data.get("analytic", []):
        mat = resolve(prim.get("material"))
        kind = prim["type"]
        if kind == "plane":
            analytic.append(Plane(mat, prim["point"], prim["normal"]))
        elif kind == "sphere":
            analytic.append(Sphere(mat, prim["center"], float(prim["radius"])))
        elif kind == "rectangle":
            analytic.append(Rectangle(mat, prim["origin"], prim["edge_u"], prim["edge_v"]))
        else:
            raise ValueError(f"unknown analytic primitive type {kind!r}")
    env_spec = data.get("environment", {"constant": [0.0, 0.0, 0.0]})
    if "constant" in env_spec:
        env = ConstantEnvironment(np.asarray(env_spec["constant"], dtype=np.float64))
    elif "image" in env_spec:
        env = ImageEnvironment(load_png(base / env_spec["image"]))
    else:
        raise ValueError("environment must specify 'constant' or 'image'")
    return Scene(cloud=cloud, analytic=analytic, environment=env, cloud_mode=cloud_mode)


def load_scene(path) -> Scene:
    path = Path(path)
    with open(path) as fh:
        return scene_from_json(json.load(fh), path.parent)
