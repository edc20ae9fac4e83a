"""Voxel-grid accelerated neighbor search along rays.

The structure is a uniform grid over the cloud's bounding box with an O(n)
build, chosen over trees because inverse rendering moves points every
iteration and a full rebuild must stay cheap.  Queries walk the grid along
the ray's dominant axis and gather the k nearest points (by perpendicular
distance) inside the delta-cylinder around the ray, restricted to the
forward half-space.  ``brute_force_knn`` is the reference oracle; the grid
paths must match it index-for-index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .geometry import CanonicalFrame, Ray, canonicalize

HALF_SPACE_TOL = -1e-6     # along-ray projection acceptance threshold
_ENUM_SLACK = 1e-5         # extra cell-box inflation to cover the half-space slack


@dataclass(frozen=True)
class QueryConfig:
    """Neighborhood size k and cylinder radius delta (scene units)."""

    k: int = 40
    delta: float = 0.1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass
class Counters:
    cells_visited: int = 0
    points_examined: int = 0
    points_sorted: int = 0

    def reset(self):
        self.cells_visited = self.points_examined = self.points_sorted = 0

    def snapshot(self) -> dict:
        return {"cells_visited": self.cells_visited,
                "points_examined": self.points_examined,
                "points_sorted": self.points_sorted}


_COUNTERS = Counters()


def cost_counters() -> dict:
    """Snapshot of the work counters accumulated since the last reset."""
    return _COUNTERS.snapshot()


def reset_cost_counters() -> None:
    _COUNTERS.reset()


@dataclass
class VoxelGrid:
    """Uniform grid over the cloud AABB; cell lists stored CSR-style."""

    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    g: int
    cell_size: np.ndarray
    starts: np.ndarray     # (g^3 + 1,) prefix offsets into point_ids
    point_ids: np.ndarray  # (n,) point indices grouped by cell, ascending in-cell
    n_points: int

    def cell_points(self, flat_index: int) -> np.ndarray:
        return self.point_ids[self.starts[flat_index]:self.starts[flat_index + 1]]

    def cell_bounds(self, flat_index: int):
        g = self.g
        ix, rem = divmod(int(flat_index), g * g)
        iy, iz = divmod(rem, g)
        idx = np.array([ix, iy, iz])
        lo = self.bounds_lo + idx * self.cell_size
        return lo, lo + self.cell_size


def default_cells_per_dim(n: int) -> int:
    return int(np.clip(np.ceil(n ** (1.0 / 3.0)), 4, 256))


def build_grid(cloud: PointCloud, g: int | None = None) -> VoxelGrid:
    """Bin every point into its cell; O(n) build, full rebuild after mutation."""
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot build a grid over an empty cloud")
    if g is None:
        g = default_cells_per_dim(n)
    if g < 1:
        raise ValueError("cells per dimension must be at least 1")
    pos = cloud.positions
    lo = pos.min(axis=0) - 1e-6
    hi = pos.max(axis=0) + 1e-6
    cell_size = (hi - lo) / g
    idx = np.clip(np.floor((pos - lo) / cell_size).astype(np.int64), 0, g - 1)
    flat = (idx[:, 0] * g + idx[:, 1]) * g + idx[:, 2]
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=g ** 3)
    starts = np.concatenate([[0], np.cumsum(counts)])
    return VoxelGrid(lo, hi, int(g), cell_size, starts.astype(np.int64),
                     order.astype(np.int64), n)


def _perp_proj(v: np.ndarray, d: np.ndarray):
    """Along-ray projection and squared perpendicular distance.

    Fixed elementwise expression so grid and brute-force paths produce
    bit-identical floats for the same (point, ray) pair.
    """
    proj = v[..., 0] * d[..., 0] + v[..., 1] * d[..., 1] + v[..., 2] * d[..., 2]
    sq = v[..., 0] ** 2 + v[..., 1] ** 2 + v[..., 2] ** 2 - proj ** 2
    return proj, sq


def _ray_box_interval(origin, direction, lo, hi):
    """Entry/exit of a ray (t >= 0) against an AABB; entry > exit means miss."""
    enter, exit_ = 0.0, np.inf
    for a in range(3):
        d = direction[a]
        if abs(d) < 1e-300:
            if origin[a] < lo[a] or origin[a] > hi[a]:
                return 1.0, 0.0
            continue
        t1 = (lo[a] - origin[a]) / d
        t2 = (hi[a] - origin[a]) / d
        if t1 > t2:
            t1, t2 = t2, t1
        enter = max(enter, t1)
        exit_ = min(exit_, t2)
    return enter, exit_


def traverse_cells(grid: VoxelGrid, ray: Ray, expand: float = 0.0) -> np.ndarray:
    """Cells whose ``expand``-inflated box intersects the ray, in entry order.

    Stepping follows the ray's dominant axis slab by slab; candidate cells in
    each slab are confirmed with an exact inflated-box test, so the yielded
    set equals a brute-force scan over all g^3 cells.  Each cell appears at
    most once.  A ray missing the inflated bounds yields an empty sequence.
    """
    o, d = ray.origin, ray.direction
    g = grid.g
    lo_all = grid.bounds_lo - expand
    hi_all = grid.bounds_hi + expand
    t0, t1 = _ray_box_interval(o, d, lo_all, hi_all)
    if t0 > t1:
        return np.empty(0, dtype=np.int64)
    axis = int(np.argmax(np.abs(d)))
    oa, da = o[axis], d[axis]
    ca = grid.cell_size[axis]
    loa = grid.bounds_lo[axis]
    # Candidate index ranges are widened by one cell on each side: a ray that
    # grazes a cell boundary exactly touches boxes on both sides, and the
    # floor-based range alone would keep only one.  The exact per-cell box
    # test below restores set equality with the brute-force oracle.
    xa, xb = oa + t0 * da, oa + t1 * da
    s_lo = int(np.clip(np.floor((min(xa, xb) - expand - loa) / ca) - 1, 0, g - 1))
    s_hi = int(np.clip(np.floor((max(xa, xb) + expand - loa) / ca) + 1, 0, g - 1))
    others = [(axis + 1) % 3, (axis + 2) % 3]
    strides = [g * g, g, 1]
    found = []
    for s in range(s_lo, s_hi + 1):
        slab_lo = loa + s * ca - expand
        slab_hi = slab_lo + ca + 2 * expand
        ta = (slab_lo - oa) / da
        tb = (slab_hi - oa) / da
        if ta > tb:
            ta, tb = tb, ta
        ta, tb = max(ta, t0), min(tb, t1)
        if ta > tb:
            continue
        ranges = []
        for ax in others:
            ya = o[ax] + ta * d[ax]
            yb = o[ax] + tb * d[ax]
            lo_y = min(ya, yb) - expand
            hi_y = max(ya, yb) + expand
            j0 = int(np.clip(np.floor((lo_y - grid.bounds_lo[ax]) / grid.cell_size[ax]) - 1,
                             0, g - 1))
            j1 = int(np.clip(np.floor((hi_y - grid.bounds_lo[ax]) / grid.cell_size[ax]) + 1,
                             0, g - 1))
            ranges.append(range(j0, j1 + 1))
        for j in ranges[0]:
            for k in ranges[1]:
                idx3 = [0, 0, 0]
                idx3[axis], idx3[others[0]], idx3[others[1]] = s, j, k
                cell_lo = grid.bounds_lo + np.array(idx3) * grid.cell_size - expand
                cell_hi = cell_lo + grid.cell_size + 2 * expand
                enter, exit_ = _ray_box_interval(o, d, cell_lo, cell_hi)
                if enter <= exit_:
                    flat = idx3[0] * strides[0] + idx3[1] * strides[1] + idx3[2]
                    found.append((enter, flat))
    found.sort()
    return np.array([f for _, f in found], dtype=np.int64)


@dataclass
class NeighborSet:
    """Up to k neighbors of one ray, ordered by perpendicular distance.

    ``canonical_points`` and ``mask`` are padded to length k; ``indices`` and
    ``distances`` hold only the ``valid_count`` real entries.  ``frame`` and
    ``z0`` carry the canonicalization used for ``canonical_points``.
    """

    indices: np.ndarray
    valid_count: int
    distances: np.ndarray
    canonical_points: np.ndarray
    mask: np.ndarray
    frame: CanonicalFrame | None = None
    z0: float = 0.0


def _select_neighbors(cloud: PointCloud, ray: Ray, cfg: QueryConfig,
                      candidates: np.ndarray) -> NeighborSet:
    v = cloud.positions[candidates] - ray.origin
    proj, perp_sq = _perp_proj(v, ray.direction)
    keep = (proj >= HALF_SPACE_TOL) & (perp_sq <= cfg.delta ** 2)
    _COUNTERS.points_sorted += int(keep.sum())
    cand = candidates[keep]
    perp_sq = perp_sq[keep]
    order = np.lexsort((cand, perp_sq))[:cfg.k]
    idx = cand[order]
    m = len(idx)
    canonical = np.zeros((cfg.k, 3))
    mask = np.zeros(cfg.k, dtype=bool)
    mask[:m] = True
    frame, z0 = None, 0.0
    if m:
        frame, canon, z0 = canonicalize(ray, cloud.positions[idx])
        canonical[:m] = canon
    return NeighborSet(idx, m, np.sqrt(perp_sq[order]), canonical, mask, frame, z0)


def brute_force_knn(cloud: PointCloud, ray: Ray, cfg: QueryConfig) -> NeighborSet:
    """Reference query scanning every point; the oracle for the grid paths."""
    return _select_neighbors(cloud, ray, cfg, np.arange(len(cloud)))


def query_cylinder_knn(grid: VoxelGrid, cloud: PointCloud, ray: Ray,
                       cfg: QueryConfig) -> NeighborSet:
    """Grid-accelerated query; equals ``brute_force_knn`` index-for-index."""
    if grid.n_points != len(cloud):
        raise ValueError("grid is stale: rebuild after mutating the cloud")
    cells = traverse_cells(grid, ray, cfg.delta + _ENUM_SLACK)
    _COUNTERS.cells_visited += len(cells)
    if len(cells) == 0:
        return _select_neighbors(cloud, ray, cfg, np.empty(0, dtype=np.int64))
    candidates = np.concatenate([grid.cell_points(c) for c in cells])
    _COUNTERS.points_examined += len(candidates)
    return _select_neighbors(cloud, ray, cfg, candidates)


@dataclass
class NeighborBatch:
    """Structure-of-arrays neighbor sets for a ray batch.

    ``indices`` is (B, kp) with -1 padding, kp <= k the widest valid count in
    the batch; ``mask`` flags real entries, ordered by perpendicular distance.
    """

    indices: np.ndarray
    mask: np.ndarray
    counts: np.ndarray


def query_rays(grid: VoxelGrid, cloud: PointCloud, origins: np.ndarray,
               directions: np.ndarray, cfg: QueryConfig,
               chunk: int = 65536) -> NeighborBatch:
    """Vectorized grid query over a batch of rays (the rendering hot path)."""
    if grid.n_points != len(cloud):
        raise ValueError("grid is stale: rebuild after mutating the cloud")
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    b = origins.shape[0]
    parts = [_query_chunk(grid, cloud, origins[s:s + chunk], directions[s:s + chunk], cfg)
             for s in range(0, b, chunk)]
    kp = max((p[0].shape[1] for p in parts), default=0)
    kp = max(kp, 1)
    indices = np.full((b, kp), -1, dtype=np.int64)
    mask = np.zeros((b, kp), dtype=bool)
    counts = np.zeros(b, dtype=np.int64)
    at = 0
    for idx, msk, cnt in parts:
        m = idx.shape[0]
        indices[at:at + m, :idx.shape[1]] = idx
        mask[at:at + m, :idx.shape[1]] = msk
        counts[at:at + m] = cnt
        at += m
    return NeighborBatch(indices, mask, counts)


def _segment_expand(counts: np.ndarray):
    """Row ids and within-row offsets for variable-length expansion."""
    total = int(counts.sum())
    rows = np.repeat(np.arange(len(counts)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    offsets = np.arange(total) - np.repeat(starts, counts)
    return rows, offsets


def _query_chunk(grid: VoxelGrid, cloud: PointCloud, o: np.ndarray, d: np.ndarray,
                 cfg: QueryConfig):
    b = o.shape[0]
    g = grid.g
    expand = cfg.delta + _ENUM_SLACK

    # Clip rays against the inflated grid bounds.
    lo_all = grid.bounds_lo - expand
    hi_all = grid.bounds_hi + expand
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo_all - o) / d
        t2 = (hi_all - o) / d
    near = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    far = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    zero_d = np.abs(d) < 1e-300
    inside = (o >= lo_all) & (o <= hi_all)
    near = np.where(zero_d, np.where(inside, -np.inf, np.inf), near)
    far = np.where(zero_d, np.where(inside, np.inf, -np.inf), far)
    t_enter = np.maximum(near.max(axis=1), 0.0)
    t_exit = far.min(axis=1)
    active = t_enter <= t_exit

    axis = np.argmax(np.abs(d), axis=1)
    cols = np.arange(b)
    strides = np.array([g * g, g, 1], dtype=np.int64)
    ax1 = (axis + 1) % 3
    ax2 = (axis + 2) % 3
    o0, d0 = o[cols, axis], d[cols, axis]
    lo0 = grid.bounds_lo[axis]
    c0 = grid.cell_size[axis]

    xa = o0 + t_enter * d0
    xb = o0 + t_exit * d0
    with np.errstate(invalid="ignore"):
        s_lo = np.clip(np.floor((np.minimum(xa, xb) - expand - lo0) / c0), 0, g - 1)
        s_hi = np.clip(np.floor((np.maximum(xa, xb) + expand - lo0) / c0), 0, g - 1)
    s_lo = np.nan_to_num(s_lo, nan=0.0).astype(np.int64)
    s_hi = np.nan_to_num(s_hi, nan=-1.0).astype(np.int64)
    slab_counts = np.where(active, np.maximum(s_hi - s_lo + 1, 0), 0)

    rows, offs = _segment_expand(slab_counts)
    if len(rows) == 0:
        return (np.full((b, 1), -1, dtype=np.int64), np.zeros((b, 1), dtype=bool),
                np.zeros(b, dtype=np.int64))
    s = s_lo[rows] + offs
    slab_lo = lo0[rows] + s * c0[rows] - expand
    slab_hi = slab_lo + c0[rows] + 2 * expand
    ta = (slab_lo - o0[rows]) / d0[rows]
    tb = (slab_hi - o0[rows]) / d0[rows]
    lo_t = np.maximum(np.minimum(ta, tb), t_enter[rows])
    hi_t = np.minimum(np.maximum(ta, tb), t_exit[rows])
    ok = lo_t <= hi_t
    rows, s, lo_t, hi_t = rows[ok], s[ok], lo_t[ok], hi_t[ok]

    # Cross-axis cell ranges over each slab's t-interval.
    rect = []
    for ax in (ax1, ax2):
        axr = ax[rows]
        oy, dy = o[rows, axr], d[rows, axr]
        ya = oy + lo_t * dy
        yb = oy + hi_t * dy
        lo_y = np.minimum(ya, yb) - expand
        hi_y = np.maximum(ya, yb) + expand
        gl = grid.bounds_lo[axr]
        cs = grid.cell_size[axr]
        j0 = np.clip(np.floor((lo_y - gl) / cs), 0, g - 1).astype(np.int64)
        j1 = np.clip(np.floor((hi_y - gl) / cs), 0, g - 1).astype(np.int64)
        rect.append((j0, j1 - j0 + 1))
    (j0, nj), (k0, nk) = rect
    cell_counts = nj * nk
    crows, coffs = _segment_expand(cell_counts)
    ray_of_cell = rows[crows]
    jj = j0[crows] + coffs // nk[crows]
    kk = k0[crows] + coffs % nk[crows]
    flat = (s[crows] * strides[axis[ray_of_cell]]
            + jj * strides[ax1[ray_of_cell]]
            + kk * strides[ax2[ray_of_cell]])
    _COUNTERS.cells_visited += len(flat)

    npts = (grid.starts[flat + 1] - grid.starts[flat]).astype(np.int64)
    prow, poff = _segment_expand(npts)
    if len(prow) == 0:
        return (np.full((b, 1), -1, dtype=np.int64), np.zeros((b, 1), dtype=bool),
                np.zeros(b, dtype=np.int64))
    pt = grid.point_ids[grid.starts[flat][prow] + poff]
    ray_of_pt = ray_of_cell[prow]
    _COUNTERS.points_examined += len(pt)

    v = cloud.positions[pt] - o[ray_of_pt]
    proj, perp_sq = _perp_proj(v, d[ray_of_pt])
    keep = (proj >= HALF_SPACE_TOL) & (perp_sq <= cfg.delta ** 2)
    pt, ray_of_pt, perp_sq = pt[keep], ray_of_pt[keep], perp_sq[keep]
    _COUNTERS.points_sorted += len(pt)
    if len(pt) == 0:
        return (np.full((b, 1), -1, dtype=np.int64), np.zeros((b, 1), dtype=bool),
                np.zeros(b, dtype=np.int64))

    order = np.lexsort((pt, perp_sq, ray_of_pt))
    pt, ray_of_pt = pt[order], ray_of_pt[order]
    counts_all = np.bincount(ray_of_pt, minlength=b)
    seg_start = np.concatenate([[0], np.cumsum(counts_all)[:-1]])
    pos = np.arange(len(pt)) - seg_start[ray_of_pt]
    keep_k = pos < cfg.k
    pt, ray_of_pt, pos = pt[keep_k], ray_of_pt[keep_k], pos[keep_k]
    counts = np.minimum(counts_all, cfg.k)
    kp = max(int(counts.max()), 1)
    indices = np.full((b, kp), -1, dtype=np.int64)
    indices[ray_of_pt, pos] = pt
    mask = np.zeros((b, kp), dtype=bool)
    mask[ray_of_pt, pos] = True
    return indices, mask, counts
