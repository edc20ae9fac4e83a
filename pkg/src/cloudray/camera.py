"""Pinhole cameras: ray generation, projection, and JSON serialization.

Conventions: camera frame is x-right, y-down, z-forward; continuous pixel
coordinates put the sample for pixel (px, py) at (px + jitter); the field of
view spans the outermost pixel centers, so focal = (W - 1) / (2 tan(fov/2)).
Poses are camera-to-world rigid transforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import Ray, normalize


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fov_deg: float
    pose: np.ndarray  # (4, 4) camera-to-world

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be at least 1x1")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError("fov must be in (0, 180) degrees")
        pose = np.asarray(self.pose, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "pose", pose)

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def optical_axis(self) -> np.ndarray:
        return self.pose[:3, 2]

    @property
    def focal(self) -> float:
        half = max(self.width, self.height) - 1
        if half <= 0:
            return np.inf
        return half / (2.0 * np.tan(np.radians(self.fov_deg) / 2.0))

    def principal_point(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.height / 2.0])


def look_at(position, target, width: int, height: int, fov_deg: float,
            up=(0.0, 0.0, 1.0)) -> Camera:
    """Camera at ``position`` looking at ``target`` with zero roll about ``up``."""
    position = np.asarray(position, dtype=np.float64)
    forward = normalize(np.asarray(target, dtype=np.float64) - position)
    up = np.asarray(up, dtype=np.float64)
    if abs(float(forward @ normalize(up))) > 1.0 - 1e-9:
        up = np.array([1.0, 0.0, 0.0])
    x_cam = normalize(np.cross(forward, up))
    y_cam = np.cross(forward, x_cam)
    pose = np.eye(4)
    pose[:3, 0] = x_cam
    pose[:3, 1] = y_cam
    pose[:3, 2] = forward
    pose[:3, 3] = position
    return Camera(width, height, fov_deg, pose)


def pixel_ray(camera: Camera, px, jitter=None) -> Ray:
    """Ray from the camera center through pixel ``px`` (+ sub-pixel jitter).

    ``jitter`` defaults to (0.5, 0.5), the pixel center.
    """
    px = np.asarray(px, dtype=np.float64).reshape(2)
    ix, iy = int(np.floor(px[0])), int(np.floor(px[1]))
    if not (0 <= ix < camera.width and 0 <= iy < camera.height):
        raise ValueError(f"pixel {(ix, iy)} outside {camera.width}x{camera.height} image")
    if jitter is None:
        jitter = (0.5, 0.5)
    sample = px + np.asarray(jitter, dtype=np.float64).reshape(2)
    dirs = _camera_dirs(camera, sample[None, :])
    return Ray(camera.position.copy(), dirs[0])


def _camera_dirs(camera: Camera, samples: np.ndarray) -> np.ndarray:
    """World-space unit directions for continuous pixel samples (n, 2)."""
    c = camera.principal_point()
    f = camera.focal
    if np.isinf(f):
        local = np.tile([0.0, 0.0, 1.0], (samples.shape[0], 1))
    else:
        local = np.stack([
            (samples[:, 0] - c[0]) / f,
            (samples[:, 1] - c[1]) / f,
            np.ones(samples.shape[0]),
        ], axis=1)
    world = local @ camera.rotation.T
    return normalize(world)


def camera_rays(camera: Camera, jitter: np.ndarray | None = None):
    """Batched rays through every pixel, row-major.

    Returns (origins (H*W, 3), directions (H*W, 3)).  ``jitter`` is an
    (H*W, 2) array of in-pixel offsets; None means pixel centers.
    """
    w, h = camera.width, camera.height
    xs, ys = np.meshgrid(np.arange(w), np.arange(h))
    samples = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    samples += 0.5 if jitter is None else jitter
    dirs = _camera_dirs(camera, samples)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def project(camera: Camera, points: np.ndarray):
    """Project world points into continuous pixel coordinates.

    Returns (pixels (n, 2), depth_z (n,), in_front (n,)); ``depth_z`` is the
    camera-frame forward coordinate, positive in front of the camera.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    local = (points - camera.position) @ camera.rotation
    z = local[:, 2]
    in_front = z > 1e-9
    zsafe = np.where(in_front, z, 1.0)
    f = camera.focal
    c = camera.principal_point()
    pix = np.stack([local[:, 0] / zsafe * f + c[0],
                    local[:, 1] / zsafe * f + c[1]], axis=1)
    return pix, z, in_front


def camera_to_json(camera: Camera) -> dict:
    return {
        "width": camera.width,
        "height": camera.height,
        "fov_deg": camera.fov_deg,
        "pose": [[float(v) for v in row] for row in camera.pose],
    }


def camera_from_json(data: dict) -> Camera:
    pose = np.asarray(data["pose"], dtype=np.float64).reshape(4, 4)
    return Camera(int(data["width"]), int(data["height"]), float(data["fov_deg"]), pose)


def save_cameras(path, cameras) -> None:
    payload = [camera_to_json(c) for c in cameras]
    with open(path, "w") as fh:
        json.dump(payload if len(payload) != 1 else payload[0], fh, indent=2)


def load_cameras(path) -> list[Camera]:
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    return [camera_from_json(d) for d in data]
