import numpy as np
import pytest

from cloudray.cloud import PointCloud
from cloudray.geometry import Ray
from cloudray.grid import (QueryConfig, VoxelGrid, brute_force_knn, build_grid,
                           cost_counters, default_cells_per_dim, query_cylinder_knn,
                           query_rays, reset_cost_counters, traverse_cells)


def random_cloud(rng, n, scale=1.0):
    return PointCloud(rng.uniform(-scale, scale, size=(n, 3)))


def random_ray(rng, scale=1.5):
    d = rng.normal(size=3)
    return Ray(rng.uniform(-scale, scale, size=3), d / np.linalg.norm(d))


# -- build ------------------------------------------------------------------

def test_build_single_point_single_cell():
    grid = build_grid(PointCloud(np.array([[0.3, 0.2, 0.1]])), g=1)
    assert grid.g == 1
    assert np.array_equal(grid.cell_points(0), [0])


def test_build_cube_corners_one_per_cell():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                       dtype=np.float64)
    grid = build_grid(PointCloud(corners), g=2)
    for flat in range(8):
        assert len(grid.cell_points(flat)) == 1
    # the union covers all points exactly once
    all_ids = np.sort(np.concatenate([grid.cell_points(i) for i in range(8)]))
    assert np.array_equal(all_ids, np.arange(8))


def test_build_counts_all_points():
    rng = np.random.default_rng(0)
    cloud = random_cloud(rng, 10000)
    grid = build_grid(cloud)
    total = sum(len(grid.cell_points(i)) for i in range(grid.g ** 3))
    assert total == 10000


def test_build_rejects_empty():
    with pytest.raises(ValueError):
        build_grid(PointCloud(np.zeros((0, 3))))


def test_default_cells_per_dim_clamped():
    assert default_cells_per_dim(1) == 4
    assert default_cells_per_dim(1000) == 10
    assert default_cells_per_dim(10 ** 9) == 256


# -- traversal --------------------------------------------------------------

def brute_force_cells(grid: VoxelGrid, ray: Ray, expand: float):
    """Oracle: test every cell's inflated box against the ray."""
    out = []
    for flat in range(grid.g ** 3):
        lo, hi = grid.cell_bounds(flat)
        lo = lo - expand
        hi = hi + expand
        enter, exit_ = 0.0, np.inf
        ok = True
        for a in range(3):
            if abs(ray.direction[a]) < 1e-300:
                if ray.origin[a] < lo[a] or ray.origin[a] > hi[a]:
                    ok = False
                    break
                continue
            t1 = (lo[a] - ray.origin[a]) / ray.direction[a]
            t2 = (hi[a] - ray.origin[a]) / ray.direction[a]
            if t1 > t2:
                t1, t2 = t2, t1
            enter = max(enter, t1)
            exit_ = min(exit_, t2)
        if ok and enter <= exit_:
            out.append(flat)
    return np.array(sorted(out), dtype=np.int64)


def test_traverse_matches_brute_force_enumeration():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, 500)
    for g in (3, 4, 7):
        grid = build_grid(cloud, g=g)
        for _ in range(60):
            ray = random_ray(rng)
            expand = float(rng.uniform(0.0, 0.2))
            got = traverse_cells(grid, ray, expand)
            assert len(np.unique(got)) == len(got)
            want = brute_force_cells(grid, ray, expand)
            assert np.array_equal(np.sort(got), want), (g, expand)


def test_traverse_axis_aligned_row():
    pts = np.stack(np.meshgrid(*[np.linspace(0.1, 0.9, 8)] * 3), axis=-1).reshape(-1, 3)
    grid = build_grid(PointCloud(pts), g=4)
    ray = Ray([-1.0, 0.5, 0.5], [1, 0, 0])
    cells = traverse_cells(grid, ray, 0.0)
    want = brute_force_cells(grid, ray, 0.0)
    assert np.array_equal(np.sort(cells), want)
    assert len(cells) >= 4  # at least the row it passes through


def test_traverse_entry_order():
    rng = np.random.default_rng(2)
    cloud = random_cloud(rng, 200)
    grid = build_grid(cloud, g=5)
    for _ in range(30):
        ray = random_ray(rng)
        cells = traverse_cells(grid, ray, 0.05)
        entries = []
        for flat in cells:
            lo, hi = grid.cell_bounds(int(flat))
            lo, hi = lo - 0.05, hi + 0.05
            t1 = (lo - ray.origin) / ray.direction
            t2 = (hi - ray.origin) / ray.direction
            entries.append(max(np.minimum(t1, t2).max(), 0.0))
        assert np.all(np.diff(entries) >= -1e-12)


def test_traverse_miss_is_empty():
    grid = build_grid(PointCloud(np.random.default_rng(3).uniform(0, 1, (50, 3))))
    assert len(traverse_cells(grid, Ray([5, 5, 5], [1, 0, 0]), 0.0)) == 0


# -- queries ----------------------------------------------------------------

def test_query_example_from_contract():
    # perp distances 0.05, 0.2, 0.05: middle point is outside delta
    cloud = PointCloud(np.array([[0.05, 0, 1], [0.2, 0, 2], [0, 0.05, 3]]))
    ray = Ray([0, 0, 0], [0, 0, 1])
    cfg = QueryConfig(k=2, delta=0.1)
    got = brute_force_knn(cloud, ray, cfg)
    assert set(got.indices) == {0, 2}
    assert got.valid_count == 2
    grid = build_grid(cloud, g=2)
    got2 = query_cylinder_knn(grid, cloud, ray, cfg)
    assert np.array_equal(got2.indices, got.indices)


def test_query_k_exceeds_candidates():
    cloud = PointCloud(np.array([[0.01, 0, 1], [0.02, 0, 2]]))
    got = brute_force_knn(cloud, Ray([0, 0, 0], [0, 0, 1]), QueryConfig(k=10, delta=0.1))
    assert got.valid_count == 2
    assert got.mask.sum() == 2
    assert len(got.mask) == 10
    assert got.canonical_points.shape == (10, 3)


def test_query_excludes_points_behind_origin():
    cloud = PointCloud(np.array([[0.0, 0, -1.0], [0.01, 0, 1.0]]))
    got = brute_force_knn(cloud, Ray([0, 0, 0], [0, 0, 1]), QueryConfig(k=5, delta=0.1))
    assert np.array_equal(got.indices, [1])


def test_query_boundary_distance_included():
    # projection 0 makes perp^2 == delta^2 bit-exactly; <= keeps the point
    cloud = PointCloud(np.array([[0.1, 0.0, 0.0]]))
    got = brute_force_knn(cloud, Ray([0, 0, 0], [0, 0, 1]), QueryConfig(k=5, delta=0.1))
    assert got.valid_count == 1


def test_query_tie_break_by_index():
    # bit-identical perpendicular distances (projection 0 kills cancellation)
    cloud = PointCloud(np.array([[0.05, 0, 0.0], [-0.05, 0, 0.0], [0.0, 0.05, 0.0],
                                 [0.09, 0, 1.0]]))
    got = brute_force_knn(cloud, Ray([0, 0, 0], [0, 0, 1]), QueryConfig(k=4, delta=0.1))
    assert np.array_equal(got.indices, [0, 1, 2, 3])
    assert np.all(np.diff(got.distances) >= 0)


def test_grid_oracle_equivalence_random():
    rng = np.random.default_rng(4)
    for trial in range(5):
        cloud = random_cloud(rng, int(rng.integers(50, 3000)))
        grid = build_grid(cloud)
        for _ in range(40):
            cfg = QueryConfig(k=int(rng.integers(1, 60)),
                              delta=float(rng.uniform(0.01, 0.5)))
            ray = random_ray(rng)
            want = brute_force_knn(cloud, ray, cfg)
            got = query_cylinder_knn(grid, cloud, ray, cfg)
            assert np.array_equal(want.indices, got.indices)


def test_batch_query_matches_brute_force():
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng, 2000)
    grid = build_grid(cloud)
    cfg = QueryConfig(k=24, delta=0.2)
    origins = rng.uniform(-1.5, 1.5, size=(300, 3))
    dirs = rng.normal(size=(300, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    nb = query_rays(grid, cloud, origins, dirs, cfg, chunk=64)
    for i in range(300):
        want = brute_force_knn(cloud, Ray(origins[i], dirs[i]), cfg)
        assert np.array_equal(nb.indices[i][nb.mask[i]], want.indices)
        assert nb.counts[i] == want.valid_count


def test_rebuild_after_mutation():
    rng = np.random.default_rng(6)
    cloud = random_cloud(rng, 1500)
    grid = build_grid(cloud)
    cfg = QueryConfig(k=16, delta=0.25)
    # mutate 10% of the points; the stale grid must refuse, a rebuild must agree
    idx = rng.choice(1500, 150, replace=False)
    cloud.positions[idx] += rng.normal(scale=0.3, size=(150, 3))
    grid2 = build_grid(cloud)
    for _ in range(50):
        ray = random_ray(rng)
        want = brute_force_knn(cloud, ray, cfg)
        got = query_cylinder_knn(grid2, cloud, ray, cfg)
        assert np.array_equal(want.indices, got.indices)
    smaller = cloud.subset(np.arange(1400))
    with pytest.raises(ValueError):
        query_cylinder_knn(grid2, smaller, random_ray(rng), cfg)


def test_neighbor_set_invariants():
    rng = np.random.default_rng(7)
    cloud = random_cloud(rng, 800)
    grid = build_grid(cloud)
    for _ in range(50):
        cfg = QueryConfig(k=int(rng.integers(1, 30)), delta=float(rng.uniform(0.05, 0.4)))
        ray = random_ray(rng)
        ns = query_cylinder_knn(grid, cloud, ray, cfg)
        assert ns.valid_count == ns.mask.sum()
        assert np.all(np.diff(ns.distances) >= 0)
        assert (ns.distances <= cfg.delta + 1e-12).all()
        proj = (cloud.positions[ns.indices] - ray.origin) @ ray.direction
        assert (proj >= -1e-6).all()


def test_cost_counters():
    rng = np.random.default_rng(8)
    reset_cost_counters()
    assert cost_counters() == {"cells_visited": 0, "points_examined": 0,
                               "points_sorted": 0}
    cloud = PointCloud(np.array([[0.0, 0.0, 0.5]]))
    grid = build_grid(cloud, g=1)
    query_cylinder_knn(grid, cloud, Ray([0, 0, 0], [0, 0, 1]), QueryConfig(4, 0.5))
    c = cost_counters()
    assert c["cells_visited"] == 1
    assert c["points_examined"] == 1
    assert c["points_sorted"] == 1
    # examined work per ray drops as the grid refines
    cloud = random_cloud(rng, 20000)
    per_ray = []
    for g in (4, 8, 16):
        grid = build_grid(cloud, g=g)
        reset_cost_counters()
        for _ in range(40):
            query_cylinder_knn(grid, cloud, random_ray(rng, 0.8), QueryConfig(8, 0.05))
        per_ray.append(cost_counters()["points_examined"] / 40)
    assert per_ray[0] > per_ray[1] > per_ray[2]


def test_query_config_validation():
    with pytest.raises(ValueError):
        QueryConfig(k=0, delta=0.1)
    with pytest.raises(ValueError):
        QueryConfig(k=5, delta=0.0)
