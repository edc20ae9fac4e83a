import numpy as np
import pytest

from cloudray.geometry import Ray, sphere_ray_intersect
from cloudray.mesh import (CheckerTexture, ConstantTexture, Mesh, intersect_rays,
                           load_obj, mesh_ray_intersect, vertex_normals)
from cloudray.train import _icosphere, _sphere_uv


def unit_triangle_mesh():
    verts = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    tris = np.array([[0, 1, 2]])
    normals = np.tile([0.0, 0.0, 1.0], (3, 1))
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return Mesh(verts, tris, normals, uv, ConstantTexture(np.array([0.2, 0.4, 0.6])))


def test_triangle_hit_analytic_plane():
    mesh = unit_triangle_mesh()
    hit = mesh_ray_intersect(mesh, Ray([0.2, 0.2, 0.0], [0, 0, 1]))
    assert hit.hit
    assert np.isclose(hit.t, 1.0)
    assert np.allclose(hit.normal, [0, 0, 1])
    assert np.allclose(hit.color, [0.2, 0.4, 0.6])


def test_triangle_reverse_direction_misses():
    mesh = unit_triangle_mesh()
    assert not mesh_ray_intersect(mesh, Ray([0.2, 0.2, 0.0], [0, 0, -1])).hit


def test_triangle_outside_misses():
    mesh = unit_triangle_mesh()
    assert not mesh_ray_intersect(mesh, Ray([0.9, 0.9, 0.0], [0, 0, 1])).hit


def test_mesh_index_validation():
    with pytest.raises(ValueError):
        Mesh(np.zeros((3, 3)), np.array([[0, 1, 5]]), None, None)


def test_icosphere_converges_to_analytic_sphere():
    rng = np.random.default_rng(0)
    rays = [Ray(rng.normal(size=3) * 0 + [0, 0, -3],
                np.append(rng.uniform(-0.25, 0.25, 2), 1.0)) for _ in range(40)]
    errors = []
    for subdiv in (1, 2, 3):
        verts, tris = _icosphere(subdiv)
        mesh = Mesh(verts, tris, verts.copy(), _sphere_uv(verts))
        errs = []
        for ray in rays:
            gt = sphere_ray_intersect([0, 0, 0], 1.0, ray)
            mh = mesh_ray_intersect(mesh, ray)
            if gt.hit and mh.hit:
                errs.append(abs(gt.t - mh.t))
        errors.append(max(errs))
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 1e-2  # grazing rays amplify the facet sagitta


def test_shared_and_general_origin_paths_agree():
    verts, tris = _icosphere(2)
    mesh = Mesh(verts, tris, verts.copy(), _sphere_uv(verts))
    rng = np.random.default_rng(1)
    o = np.array([0.3, -0.2, -3.0])
    dirs = rng.normal(size=(64, 3))
    dirs[:, 2] = np.abs(dirs[:, 2]) + 1.0
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    shared = intersect_rays(mesh, np.tile(o, (64, 1)), dirs)
    wiggle = np.tile(o, (64, 1))
    wiggle[0, 0] += 1e-12  # breaks the shared-origin detection only
    general = intersect_rays(mesh, wiggle, dirs)
    assert np.array_equal(shared[0], general[0])
    both = shared[0]
    assert np.allclose(shared[1][both], general[1][both], atol=1e-9)
    assert np.allclose(shared[2][both], general[2][both], atol=1e-9)


def test_hit_point_on_triangle_plane():
    verts, tris = _icosphere(2)
    mesh = Mesh(verts, tris, verts.copy(), _sphere_uv(verts))
    rng = np.random.default_rng(2)
    o = np.array([0.0, 0.1, -2.5])
    dirs = rng.normal(scale=0.15, size=(128, 3))
    dirs[:, 2] = 1.0
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    hit, t, _, _ = intersect_rays(mesh, np.tile(o, (128, 1)), dirs)
    pts = o + t[hit, None] * dirs[hit]
    # every hit point must lie within the unit ball shell of its facet
    r = np.linalg.norm(pts, axis=1)
    assert (r <= 1.0 + 1e-9).all() and (r >= 0.9).all()


def test_checker_texture_parity():
    tex = CheckerTexture(np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]), cells=2)
    a = tex.sample(np.array([[0.1, 0.1]]))[0]
    b = tex.sample(np.array([[0.6, 0.1]]))[0]
    assert np.allclose(a, [1, 0, 0])
    assert np.allclose(b, [0, 0, 1])


def test_vertex_normals_unit():
    verts, tris = _icosphere(1)
    vn = vertex_normals(verts, tris)
    assert np.allclose(np.linalg.norm(vn, axis=1), 1.0, atol=1e-9)
    # icosphere vertex normals point radially outward
    assert (np.einsum("ij,ij->i", vn, verts) > 0.9).all()


def test_obj_round_trip(tmp_path):
    path = tmp_path / "tri.obj"
    path.write_text("\n".join([
        "# comment",
        "v 0 0 1", "v 1 0 1", "v 0 1 1", "v 1 1 1",
        "vt 0 0", "vt 1 0", "vt 0 1", "vt 1 1",
        "vn 0 0 1",
        "f 1/1/1 2/2/1 4/4/1 3/3/1",   # quad, fan-triangulated
    ]))
    mesh = load_obj(path)
    assert len(mesh.vertices) == 4
    assert len(mesh.triangles) == 2
    assert np.allclose(mesh.normals, [[0, 0, 1]] * 4)
    hit = mesh_ray_intersect(mesh, Ray([0.5, 0.5, 0], [0, 0, 1]))
    assert hit.hit and np.isclose(hit.t, 1.0)


def test_obj_rejects_garbage(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\n")
    with pytest.raises(ValueError):
        load_obj(path)
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(ValueError):
        load_obj(path)
