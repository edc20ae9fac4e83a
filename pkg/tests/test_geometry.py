import numpy as np
import pytest

from cloudray.geometry import (CanonicalFrame, Ray, canonicalize,
                               decanonicalize_normal, plane_ray_intersect,
                               random_rigid_transform, rotation_to_z,
                               sphere_ray_intersect)


def test_ray_normalizes_direction():
    r = Ray([0, 0, 0], [0, 0, 5])
    assert np.allclose(r.direction, [0, 0, 1])


def test_ray_rejects_degenerate_direction():
    with pytest.raises(ValueError):
        Ray([0, 0, 0], [0, 0, 0])


def test_rotation_to_z_maps_direction():
    rng = np.random.default_rng(0)
    for _ in range(500):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        r = rotation_to_z(d)
        assert np.allclose(r @ d, [0, 0, 1], atol=1e-9)
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-9)
        assert np.isclose(np.linalg.det(r), 1.0, atol=1e-9)


def test_rotation_to_z_antipodal_fallback():
    r = rotation_to_z(np.array([0.0, 0.0, -1.0]))
    assert np.allclose(r, np.diag([1.0, -1.0, -1.0]))
    assert np.allclose(r @ [0, 0, -1], [0, 0, 1])


def test_canonicalize_identity_case():
    frame, canon, z0 = canonicalize(Ray([0, 0, 0], [0, 0, 1]), np.array([[0.0, 0.0, 2.0]]))
    assert np.allclose(frame.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(canon, [[0, 0, 0]], atol=1e-12)
    assert np.isclose(z0, 2.0)


def test_canonicalize_axis_swap_case():
    frame, canon, z0 = canonicalize(Ray([0, 0, 0], [1, 0, 0]), np.array([[3.0, 0.0, 0.0]]))
    assert np.allclose(canon, [[0, 0, 0]], atol=1e-12)
    assert np.isclose(z0, 3.0)
    # canonical ray origin is (0, 0, -z0)
    assert np.allclose(frame.apply(np.zeros((1, 3))), [[0, 0, -3.0]], atol=1e-12)


def test_canonicalize_requires_points():
    with pytest.raises(ValueError):
        canonicalize(Ray([0, 0, 0], [0, 0, 1]), np.zeros((0, 3)))


def test_canonicalize_is_isometry():
    rng = np.random.default_rng(1)
    for _ in range(20):
        ray = Ray(rng.normal(size=3), rng.normal(size=3))
        pts = (ray.origin + rng.uniform(0.2, 3.0, (15, 1)) * ray.direction
               + rng.normal(scale=0.2, size=(15, 3)))
        _, canon, _ = canonicalize(ray, pts)
        orig_d = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
        canon_d = np.linalg.norm(canon[:, None] - canon[None, :], axis=-1)
        assert np.abs(orig_d - canon_d).max() < 1e-6


def test_canonicalize_rigid_invariance():
    """Canonical coordinates are identical under rigid motion of (ray, points)."""
    rng = np.random.default_rng(2)
    ray = Ray(rng.normal(size=3), rng.normal(size=3))
    pts = (ray.origin + rng.uniform(0.2, 3.0, (20, 1)) * ray.direction
           + rng.normal(scale=0.1, size=(20, 3)))
    _, canon, z0 = canonicalize(ray, pts)
    for _ in range(100):
        rot, b = random_rigid_transform(rng)
        d2 = rot @ ray.direction
        if np.linalg.norm(d2 + [0, 0, 1]) < 1e-3:
            continue
        ray2 = Ray(rot @ ray.origin + b, d2)
        _, canon2, z02 = canonicalize(ray2, pts @ rot.T + b)
        assert np.abs(canon2 - canon).max() < 1e-5
        assert abs(z02 - z0) < 1e-5


def test_canonicalize_anchor_on_plane_and_half_space():
    rng = np.random.default_rng(3)
    for _ in range(50):
        ray = Ray(rng.normal(size=3), rng.normal(size=3))
        pts = (ray.origin + rng.uniform(0.0, 3.0, (10, 1)) * ray.direction
               + rng.normal(scale=0.3, size=(10, 3)))
        proj = (pts - ray.origin) @ ray.direction
        pts = pts[proj >= 0]
        if len(pts) == 0:
            continue
        _, canon, z0 = canonicalize(ray, pts)
        assert np.isclose(canon[:, 2].min(), 0.0, atol=1e-9)
        assert z0 >= -1e-9


def test_decanonicalize_flip_rule():
    frame = CanonicalFrame(np.eye(3), np.zeros(3))
    ray = Ray([0, 0, 0], [0, 0, 1])
    out = decanonicalize_normal(frame, np.array([0.0, 0.0, 1.0]), ray)
    assert np.allclose(out, [0, 0, -1])
    out = decanonicalize_normal(frame, np.array([0.0, 0.0, -1.0]), ray)
    assert np.allclose(out, [0, 0, -1])


def test_decanonicalize_property():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        d = rng.normal(size=3)
        ray = Ray(rng.normal(size=3), d)
        rot, _ = random_rigid_transform(rng)
        frame = CanonicalFrame(rot, np.zeros(3))
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        out = decanonicalize_normal(frame, n, ray)
        assert abs(np.linalg.norm(out) - 1.0) < 1e-9
        assert out @ ray.direction <= 1e-12


def test_sphere_intersect_axis():
    hit = sphere_ray_intersect([0, 0, 0], 1.0, Ray([0, 0, -3], [0, 0, 1]))
    assert hit.hit
    assert np.isclose(hit.t, 2.0)
    assert np.allclose(hit.normal, [0, 0, -1])


def test_sphere_grazing_tangent():
    # perpendicular distance exactly the radius: discriminant 0, tangent hit
    hit = sphere_ray_intersect([0, 0, 0], 1.0, Ray([1, 0, -5], [0, 0, 1]))
    assert hit.hit
    assert np.isclose(hit.t, 5.0)


def test_sphere_miss():
    assert not sphere_ray_intersect([0, 0, 0], 1.0, Ray([1.5, 0, -5], [0, 0, 1])).hit
    with pytest.raises(ValueError):
        sphere_ray_intersect([0, 0, 0], -1.0, Ray([0, 0, -5], [0, 0, 1]))


def test_plane_intersect():
    hit = plane_ray_intersect([0, 0, 1], [0, 0, 1], Ray([0.3, -0.2, 0], [0, 0, 1]))
    assert hit.hit and np.isclose(hit.t, 1.0)
    assert hit.normal @ np.array([0, 0, 1.0]) < 0
    assert not plane_ray_intersect([0, 0, 1], [0, 0, 1], Ray([0, 0, 2], [1, 0, 0])).hit
