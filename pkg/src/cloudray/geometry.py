"""Rays, rigid canonicalization, and analytic intersection oracles.

The canonical frame places a query ray on the +z axis with the nearest
forward point on the z=0 plane, removing the rigid-motion and along-ray
ambiguities before any learned processing.  All functions here are pure and
operate on float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_Z = np.array([0.0, 0.0, 1.0])


def normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


@dataclass(frozen=True)
class Ray:
    """Half-line with unit direction, in scene units."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise ValueError("ray direction is degenerate (zero length)")
        if abs(n - 1.0) > 1e-6:
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class CanonicalFrame:
    """Rigid map x -> rotation @ x + translation sending a ray to the +z axis."""

    rotation: np.ndarray      # (3, 3), orthonormal, det +1
    translation: np.ndarray   # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return vectors @ self.rotation.T

    def invert_rotate(self, vectors: np.ndarray) -> np.ndarray:
        return vectors @ self.rotation


def rotation_to_z(direction: np.ndarray) -> np.ndarray:
    """Minimal rotation taking a unit vector onto (0, 0, 1).

    Near the antipode (|direction + z| < 1e-3) the minimal rotation is
    ill-conditioned; a fixed pi rotation about the x axis is used instead.
    """
    d = np.asarray(direction, dtype=np.float64)
    if np.linalg.norm(d + _Z) < 1e-3:
        return np.diag([1.0, -1.0, -1.0])
    c = d[2]
    ax, ay = d[1], -d[0]            # d x z
    k = 1.0 / (1.0 + c)             # (1 - cos) / sin^2 without cancellation
    return np.array([
        [1.0 - k * ay * ay, k * ax * ay, ay],
        [k * ax * ay, 1.0 - k * ax * ax, -ax],
        [-ay, ax, c],
    ])


def canonicalize(ray: Ray, points: np.ndarray):
    """Canonicalize a ray and its neighbor points.

    Returns ``(frame, canonical_points, z0)`` where ``z0`` is the smallest
    along-ray projection among ``points``; the canonical ray is
    (origin (0,0,-z0), direction (0,0,1)) and the anchoring point lands on
    the z=0 plane.

    The residual roll about the ray axis is fixed by rotating the point with
    the largest perpendicular distance onto the +x half plane (ties broken by
    ascending point index, points within 1e-9 of the axis leave the roll at
    the minimal rotation).  Anchoring the roll on the point set itself makes
    the canonical coordinates invariant under rigid motion of (ray, points),
    which a fixed world-axis convention cannot achieve.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if p.shape[0] == 0:
        raise ValueError("canonicalize requires at least one point")
    base = rotation_to_z(ray.direction)
    q = (p - ray.origin) @ base.T
    perp_sq = q[:, 0] ** 2 + q[:, 1] ** 2
    anchor = int(np.argmax(perp_sq))
    if perp_sq[anchor] >= 1e-18:
        rho = np.sqrt(perp_sq[anchor])
        cphi, sphi = q[anchor, 0] / rho, q[anchor, 1] / rho
        roll = np.array([[cphi, sphi, 0.0], [-sphi, cphi, 0.0], [0.0, 0.0, 1.0]])
        rotation = roll @ base
        q = q @ roll.T
    else:
        rotation = base
    z0 = float(q[:, 2].min())
    canonical = q - np.array([0.0, 0.0, z0])
    translation = -rotation @ ray.origin - np.array([0.0, 0.0, z0])
    return CanonicalFrame(rotation, translation), canonical, z0


def decanonicalize_normal(frame: CanonicalFrame, n_canonical: np.ndarray, ray: Ray) -> np.ndarray:
    """Map a canonical-frame unit normal back to world and face it against the ray."""
    n = frame.rotation.T @ np.asarray(n_canonical, dtype=np.float64)
    if float(n @ ray.direction) > 0.0:
        n = -n
    return n


@dataclass(frozen=True)
class GroundTruthHit:
    """Reference intersection record; t/normal/color are None on a miss."""

    hit: bool
    t: float | None = None
    normal: np.ndarray | None = None
    color: np.ndarray | None = None


MISS = GroundTruthHit(hit=False)


def sphere_ray_intersect(center, radius: float, ray: Ray) -> GroundTruthHit:
    """Closed-form nearest positive intersection with a sphere."""
    if radius <= 0:
        raise ValueError("sphere radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    oc = ray.origin - center
    b = float(oc @ ray.direction)
    c = float(oc @ oc) - radius * radius
    disc = b * b - c
    if disc < 0:
        return MISS
    root = np.sqrt(disc)
    t = -b - root
    if t <= 1e-12:
        t = -b + root
    if t <= 1e-12:
        return MISS
    p = ray.at(t)
    return GroundTruthHit(True, float(t), (p - center) / radius, None)


def plane_ray_intersect(point, normal, ray: Ray) -> GroundTruthHit:
    """Nearest positive intersection with a two-sided infinite plane."""
    point = np.asarray(point, dtype=np.float64)
    n = normalize(np.asarray(normal, dtype=np.float64))
    denom = float(n @ ray.direction)
    if abs(denom) < 1e-12:
        return MISS
    t = float((point - ray.origin) @ n) / denom
    if t <= 1e-12:
        return MISS
    return GroundTruthHit(True, t, n if denom < 0 else -n, None)


def random_rigid_transform(rng: np.random.Generator, translation_scale: float = 5.0):
    """Uniform random rotation matrix and translation (test utility)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    return rot, rng.uniform(-translation_scale, translation_scale, size=3)
