"""Triangle meshes: ground-truth ray intersection, textures, OBJ ingestion.

Intersection is brute-force Moller-Trumbore over all triangles, vectorized
over ray chunks; at desk scale (<= a few thousand triangles) this outruns the
bookkeeping cost of an acceleration structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GroundTruthHit, MISS, Ray, normalize

_EPS = 1e-12


class Texture:
    """Procedural or image-backed color lookup on the uv square."""

    def sample(self, uv: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass
class ConstantTexture(Texture):
    color: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.7]))

    def sample(self, uv):
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        return np.broadcast_to(np.asarray(self.color, dtype=np.float64), (uv.shape[0], 3)).copy()


@dataclass
class CheckerTexture(Texture):
    """Checkerboard with optional hash-noise modulation, for blend-weight supervision."""

    color_a: np.ndarray
    color_b: np.ndarray
    cells: int = 8
    noise: float = 0.0

    def sample(self, uv):
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        ij = np.floor(uv * self.cells).astype(np.int64)
        parity = (ij[:, 0] + ij[:, 1]) % 2
        out = np.where(parity[:, None] == 0, self.color_a, self.color_b).astype(np.float64)
        if self.noise > 0.0:
            h = (ij[:, 0] * 73856093) ^ (ij[:, 1] * 19349663)
            out = out * (1.0 - self.noise + self.noise * ((h % 997) / 997.0)[:, None])
        return np.clip(out, 0.0, 1.0)


@dataclass
class ImageTexture(Texture):
    image: np.ndarray  # (H, W, 3) in [0, 1]

    def sample(self, uv):
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        h, w = self.image.shape[:2]
        x = np.clip((uv[:, 0] % 1.0) * w, 0, w - 1).astype(np.int64)
        y = np.clip((uv[:, 1] % 1.0) * h, 0, h - 1).astype(np.int64)
        return self.image[y, x].astype(np.float64)


@dataclass
class Mesh:
    vertices: np.ndarray        # (V, 3)
    triangles: np.ndarray       # (T, 3) int
    normals: np.ndarray         # (V, 3) unit, per vertex
    uv: np.ndarray              # (V, 2)
    texture: Texture = field(default_factory=ConstantTexture)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if self.normals is None:
            self.normals = vertex_normals(self.vertices, self.triangles)
        self.normals = normalize(np.asarray(self.normals, dtype=np.float64).reshape(-1, 3))
        if self.uv is None:
            self.uv = np.zeros((len(self.vertices), 2))
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        self._cache = None

    def _tri_arrays(self):
        if self._cache is None:
            v0 = self.vertices[self.triangles[:, 0]]
            e1 = self.vertices[self.triangles[:, 1]] - v0
            e2 = self.vertices[self.triangles[:, 2]] - v0
            self._cache = (v0, e1, e2)
        return self._cache

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def normalized(self, longest_side: float = 2.0) -> "Mesh":
        """Centered copy with the longest bounding-box side scaled to ``longest_side``."""
        lo, hi = self.bounds()
        center = (lo + hi) / 2.0
        scale = longest_side / max(float((hi - lo).max()), 1e-12)
        return Mesh((self.vertices - center) * scale, self.triangles.copy(),
                    self.normals.copy(), self.uv.copy(), self.texture)


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    v0 = vertices[triangles[:, 0]]
    fn = np.cross(vertices[triangles[:, 1]] - v0, vertices[triangles[:, 2]] - v0)
    out = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(out, triangles[:, k], fn)
    lens = np.linalg.norm(out, axis=1, keepdims=True)
    lens[lens < 1e-20] = 1.0
    return out / lens


def _mt_select(t, u, v, ok, s, t_out, tri_out, bary_out):
    t = np.where(ok, t, np.inf)
    best = np.argmin(t, axis=1)
    rows = np.arange(t.shape[0])
    tbest = t[rows, best]
    found = np.isfinite(tbest)
    idx = s + rows[found]
    t_out[idx] = tbest[found]
    tri_out[idx] = best[found]
    bary_out[idx, 0] = u[rows, best][found]
    bary_out[idx, 1] = v[rows, best][found]


def intersect_rays(mesh: Mesh, origins: np.ndarray, directions: np.ndarray,
                   chunk: int = 2048):
    """Nearest-hit intersection for a batch of rays.

    Returns (hit (n,) bool, t (n,), normal (n, 3), color (n, 3)); missing rays
    carry t = +inf and zero normal/color.  Rays sharing one origin (camera
    captures) reduce to three (B,3)x(3,T) matmuls per chunk.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    v0, e1, e2 = mesh._tri_arrays()
    t_out = np.full(n, np.inf)
    tri_out = np.full(n, -1, dtype=np.int64)
    bary_out = np.zeros((n, 2))
    shared = n > 0 and not np.any(origins != origins[0])
    if shared:
        # Triple-product form: det = -d.(e1 x e2), u = d.(e2 x tvec)/det,
        # v = d.(tvec x e1)/det, t = e2.(tvec x e1)/det with tvec = o - v0.
        tvec = origins[0] - v0
        neg_cross_e = -np.cross(e1, e2).T        # (3, T)
        u_mat = np.cross(e2, tvec).T
        qvec = np.cross(tvec, e1)
        tq = np.einsum("tj,tj->t", e2, qvec)
        q_mat = qvec.T
        for s in range(0, n, chunk):
            d = directions[s:s + chunk]
            det = d @ neg_cross_e
            inv_det = np.where(np.abs(det) > _EPS, 1.0 / np.where(det == 0, 1.0, det), 0.0)
            u = (d @ u_mat) * inv_det
            v = (d @ q_mat) * inv_det
            t = tq[None, :] * inv_det
            ok = ((np.abs(det) > _EPS) & (u >= 0.0) & (v >= 0.0)
                  & (u + v <= 1.0) & (t > 1e-9))
            _mt_select(t, u, v, ok, s, t_out, tri_out, bary_out)
    else:
        for s in range(0, n, chunk):
            o = origins[s:s + chunk]
            d = directions[s:s + chunk]
            pvec = np.cross(d[:, None, :], e2[None, :, :])          # (B, T, 3)
            det = np.einsum("tj,btj->bt", e1, pvec)
            inv_det = np.where(np.abs(det) > _EPS, 1.0 / np.where(det == 0, 1.0, det), 0.0)
            tvec = o[:, None, :] - v0[None, :, :]
            u = np.einsum("btj,btj->bt", tvec, pvec) * inv_det
            qvec = np.cross(tvec, e1[None, :, :])
            v = np.einsum("bj,btj->bt", d, qvec) * inv_det
            t = np.einsum("tj,btj->bt", e2, qvec) * inv_det
            ok = ((np.abs(det) > _EPS) & (u >= 0.0) & (v >= 0.0)
                  & (u + v <= 1.0) & (t > 1e-9))
            _mt_select(t, u, v, ok, s, t_out, tri_out, bary_out)
    hit = tri_out >= 0
    normal = np.zeros((n, 3))
    color = np.zeros((n, 3))
    if hit.any():
        tri = mesh.triangles[tri_out[hit]]
        u = bary_out[hit, 0][:, None]
        v = bary_out[hit, 1][:, None]
        w = 1.0 - u - v
        nrm = (w * mesh.normals[tri[:, 0]] + u * mesh.normals[tri[:, 1]]
               + v * mesh.normals[tri[:, 2]])
        normal[hit] = normalize(nrm)
        uv = (w * mesh.uv[tri[:, 0]] + u * mesh.uv[tri[:, 1]] + v * mesh.uv[tri[:, 2]])
        color[hit] = mesh.texture.sample(uv)
    return hit, t_out, normal, color


def mesh_ray_intersect(mesh: Mesh, ray: Ray) -> GroundTruthHit:
    """Nearest positive-t triangle hit with interpolated normal and texture color."""
    hit, t, normal, color = intersect_rays(mesh, ray.origin[None], ray.direction[None])
    if not hit[0]:
        return MISS
    return GroundTruthHit(True, float(t[0]), normal[0], color[0])


def load_obj(path) -> Mesh:
    """OBJ ingestion: v/vt/vn and polygonal faces (triangulated by fan)."""
    verts, uvs, norms = [], [], []
    face_v, face_vt, face_vn = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "vn":
                norms.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                corners = []
                for spec in parts[1:]:
                    fields = spec.split("/")
                    vi = int(fields[0])
                    ti = int(fields[1]) if len(fields) > 1 and fields[1] else 0
                    ni = int(fields[2]) if len(fields) > 2 and fields[2] else 0
                    corners.append((vi, ti, ni))
                for a in range(1, len(corners) - 1):
                    face_v.append((corners[0][0], corners[a][0], corners[a + 1][0]))
                    face_vt.append((corners[0][1], corners[a][1], corners[a + 1][1]))
                    face_vn.append((corners[0][2], corners[a][2], corners[a + 1][2]))
    if not verts or not face_v:
        raise ValueError(f"no geometry found in OBJ file {path}")
    verts = np.asarray(verts)
    nv = len(verts)

    def resolve(i, count):
        return i - 1 if i > 0 else count + i

    tris = np.array([[resolve(i, nv) for i in f] for f in face_v], dtype=np.int64)
    if tris.min() < 0 or tris.max() >= nv:
        raise ValueError("OBJ face index out of range")

    vn = None
    if norms and any(any(i != 0 for i in f) for f in face_vn):
        vn = np.zeros((nv, 3))
        norms = np.asarray(norms)
        for f_v, f_n in zip(face_v, face_vn):
            for vi, ni in zip(f_v, f_n):
                if ni != 0:
                    vn[resolve(vi, nv)] = norms[resolve(ni, len(norms))]
        if not np.all(np.linalg.norm(vn, axis=1) > 1e-12):
            vn = None
    uv = None
    if uvs and any(any(i != 0 for i in f) for f in face_vt):
        uv = np.zeros((nv, 2))
        uvs = np.asarray(uvs)
        for f_v, f_t in zip(face_v, face_vt):
            for vi, ti in zip(f_v, f_t):
                if ti != 0:
                    uv[resolve(vi, nv)] = uvs[resolve(ti, len(uvs))]
    return Mesh(verts, tris, vn, uv)
