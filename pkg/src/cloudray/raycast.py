"""The full cloud-ray intersection operator: neighbors -> canonical frame ->
network -> world-frame surface hits.

Canonicalization is done in torch so the same code serves fast no-grad
inference (float32, from numpy clouds) and differentiable inverse rendering
(any dtype, gradients flowing into point positions and colors, including
through the z-anchor and roll choice).  Neighbor selection itself is discrete
and always detached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cloud import PointCloud
from .geometry import Ray
from .grid import NeighborBatch, NeighborSet, QueryConfig, VoxelGrid, query_rays
from .model import CloudRayModel, ModelOutput, assemble_features, blended_color

HIT_THRESHOLD = 0.5  # Bayes threshold for the cross-entropy-trained hit probability


def canonicalize_batch(origins: torch.Tensor, directions: torch.Tensor,
                       points: torch.Tensor, mask: torch.Tensor):
    """Batched rigid canonicalization of rays and neighbor points.

    Returns (rotation (B, 3, 3), canonical (B, K, 3), z0 (B,)).  Mirrors
    ``geometry.canonicalize``: direction to +z (antipode falls back to a pi
    rotation about x), roll anchored on the farthest-from-axis valid point,
    z0 the smallest along-ray projection among valid points.  Every ray must
    have at least one valid entry.
    """
    dt = points.dtype
    b = origins.shape[0]
    d = directions
    z = torch.zeros(3, dtype=dt)
    z[2] = 1.0
    antipodal = torch.linalg.norm(d + z, dim=-1) < 1e-3
    ax = d[:, 1]
    ay = -d[:, 0]
    c = d[:, 2]
    k = 1.0 / (1.0 + torch.where(antipodal, torch.zeros_like(c), c))
    base = torch.stack([
        torch.stack([1.0 - k * ay * ay, k * ax * ay, ay], dim=-1),
        torch.stack([k * ax * ay, 1.0 - k * ax * ax, -ax], dim=-1),
        torch.stack([-ay, ax, c], dim=-1),
    ], dim=1)
    flip = torch.tensor([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]], dtype=dt)
    base = torch.where(antipodal[:, None, None], flip, base)

    q = torch.einsum("bij,bkj->bki", base, points - origins[:, None, :])
    perp_sq = q[..., 0] ** 2 + q[..., 1] ** 2
    neg = torch.full_like(perp_sq, -1.0)
    anchor = torch.where(mask, perp_sq, neg).argmax(dim=1)
    rows = torch.arange(b)
    ax_x = q[rows, anchor, 0]
    ax_y = q[rows, anchor, 1]
    rho = torch.sqrt(torch.clamp(ax_x ** 2 + ax_y ** 2, min=0.0))
    needs_roll = rho >= 1e-9
    safe_rho = torch.where(needs_roll, rho, torch.ones_like(rho))
    cphi = torch.where(needs_roll, ax_x / safe_rho, torch.ones_like(rho))
    sphi = torch.where(needs_roll, ax_y / safe_rho, torch.zeros_like(rho))
    zero = torch.zeros_like(cphi)
    one = torch.ones_like(cphi)
    roll = torch.stack([
        torch.stack([cphi, sphi, zero], dim=-1),
        torch.stack([-sphi, cphi, zero], dim=-1),
        torch.stack([zero, zero, one], dim=-1),
    ], dim=1)
    rotation = roll @ base
    q = torch.einsum("bij,bkj->bki", roll, q)
    big = torch.full_like(q[..., 2], torch.finfo(dt).max)
    z0 = torch.where(mask, q[..., 2], big).min(dim=1).values
    canonical = q - torch.stack([torch.zeros_like(z0), torch.zeros_like(z0), z0],
                                dim=-1)[:, None, :]
    canonical = canonical * mask[..., None].to(dt)
    return rotation, canonical, z0


@dataclass
class SurfaceHit:
    """Batched world-frame surface estimates for a set of query rays.

    ``valid`` marks rays that had at least one neighbor (the operator was
    evaluated); everything else is a structural miss.  ``hit`` applies the
    decision threshold and requires positive travel distance.  ``weights``
    rows are convex combinations over ``indices`` with zeros on padding.
    """

    valid: np.ndarray       # (B,) bool
    hit_prob: np.ndarray    # (B,)
    t: np.ndarray           # (B,)
    normal: np.ndarray      # (B, 3)
    point: np.ndarray       # (B, 3)
    weights: np.ndarray     # (B, K)
    indices: np.ndarray     # (B, K) int, -1 padding
    color: np.ndarray       # (B, 3) blended neighbor colors

    @property
    def hit(self) -> np.ndarray:
        return self.valid & (self.hit_prob >= HIT_THRESHOLD) & (self.t > 1e-6)


def run_operator(model: CloudRayModel, origins: torch.Tensor, directions: torch.Tensor,
                 positions: torch.Tensor, colors: torch.Tensor, capture: torch.Tensor,
                 has_color: torch.Tensor, has_capture: torch.Tensor,
                 mask: torch.Tensor, train_mode: bool = False,
                 rng: torch.Generator | None = None):
    """Canonicalize, run the network, and map back to world (torch, differentiable).

    Inputs are gathered per ray: positions/colors (B, K, 3), capture (B, K, 12),
    flags (B, K).  Returns (out: ModelOutput, t_world, normal_world, color).
    """
    rotation, canonical, z0 = canonicalize_batch(origins, directions, positions, mask)
    cap = capture.reshape(*capture.shape[:2], 4, 3)
    cap = torch.einsum("bij,bkfj->bkfi", rotation, cap).reshape(*capture.shape[:2], 12)
    cap = cap * mask[..., None].to(positions.dtype)
    feats = assemble_features(canonical, colors, cap,
                              has_color.to(positions.dtype),
                              has_capture.to(positions.dtype))
    out = model(feats, mask, train_mode=train_mode, rng=rng)
    t_world = out.t + z0
    n_world = torch.einsum("bji,bj->bi", rotation, out.normal)
    facing = (n_world * directions).sum(dim=-1, keepdim=True)
    n_world = torch.where(facing > 0, -n_world, n_world)
    color = blended_color(out.weights, colors)
    return out, t_world, n_world, color


def gather_batch(cloud: PointCloud, nb: NeighborBatch, dtype=torch.float32):
    """Torch tensors of the neighbor records selected by a batch query."""
    sel = np.maximum(nb.indices, 0)
    mask_np = nb.mask
    positions = torch.from_numpy(cloud.positions[sel]).to(dtype)
    colors = torch.from_numpy(cloud.colors[sel]).to(dtype)
    capture = torch.from_numpy(cloud.capture.stacked()[sel]).to(dtype)
    has_color = torch.from_numpy((cloud.has_color[sel] & mask_np).astype(np.float64)).to(dtype)
    has_capture = torch.from_numpy((cloud.has_capture[sel] & mask_np).astype(np.float64)).to(dtype)
    mask = torch.from_numpy(mask_np)
    return positions, colors, capture, has_color, has_capture, mask


def cast_rays(model: CloudRayModel, cloud: PointCloud, grid: VoxelGrid,
              origins: np.ndarray, directions: np.ndarray, cfg: QueryConfig,
              chunk: int = 8192) -> SurfaceHit:
    """Inference-mode operator over a numpy ray batch (rendering entry point)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    b = origins.shape[0]
    nb = query_rays(grid, cloud, origins, directions, cfg)
    kp = nb.indices.shape[1]
    result = SurfaceHit(
        valid=nb.counts > 0,
        hit_prob=np.zeros(b),
        t=np.zeros(b),
        normal=np.zeros((b, 3)),
        point=np.zeros((b, 3)),
        weights=np.zeros((b, kp)),
        indices=nb.indices.copy(),
        color=np.zeros((b, 3)),
    )
    live = np.flatnonzero(result.valid)
    if len(live) == 0:
        return result
    with torch.no_grad():
        for s in range(0, len(live), chunk):
            rows = live[s:s + chunk]
            kmax = max(int(nb.counts[rows].max()), 1)
            sub = NeighborBatch(nb.indices[rows, :kmax], nb.mask[rows, :kmax],
                                nb.counts[rows])
            # Canonical geometry in float64; the network sees float32.
            pos64, col64, cap64, hc64, ha64, mask = gather_batch(cloud, sub,
                                                                 dtype=torch.float64)
            o_t = torch.from_numpy(origins[rows])
            d_t = torch.from_numpy(directions[rows])
            rotation, canonical, z0 = canonicalize_batch(o_t, d_t, pos64, mask)
            cap = cap64.reshape(len(rows), kmax, 4, 3)
            cap = torch.einsum("bij,bkfj->bkfi", rotation, cap).reshape(len(rows), kmax, 12)
            cap = cap * mask[..., None].to(torch.float64)
            feats = assemble_features(canonical, col64, cap, hc64, ha64).to(torch.float32)
            out = model(feats, mask)
            t_world = out.t.double() + z0
            n_world = torch.einsum("bji,bj->bi", rotation, out.normal.double())
            facing = (n_world * d_t).sum(dim=-1, keepdim=True)
            n_world = torch.where(facing > 0, -n_world, n_world)
            color = blended_color(out.weights.double(), col64)
            result.hit_prob[rows] = out.hit_prob.double().numpy()
            result.t[rows] = t_world.numpy()
            result.normal[rows] = n_world.numpy()
            result.point[rows] = origins[rows] + t_world.numpy()[:, None] * directions[rows]
            result.weights[rows, :kmax] = out.weights.double().numpy()
            result.color[rows] = color.numpy()
    return result


def embed_features(model: CloudRayModel, neighbors: NeighborSet, cloud: PointCloud,
                   ray: Ray) -> torch.Tensor:
    """Token sequence (k+1, d) for one ray's neighbor set (query token first).

    Padded slots are present but masked by ``neighbors.mask`` downstream.
    Invalid color slots carry the neutral gray fill, invalid capture slots
    zeros, matching the cloud's stored fills.
    """
    if neighbors.valid_count == 0:
        raise ValueError("cannot embed an empty neighbor set")
    k = len(neighbors.mask)
    idx = np.concatenate([neighbors.indices,
                          np.zeros(k - neighbors.valid_count, dtype=np.int64)])
    colors = torch.from_numpy(cloud.colors[idx]).to(torch.float32)
    cap = cloud.capture.stacked()[idx] @ _blockdiag_rotation(neighbors.frame.rotation)
    cap_t = torch.from_numpy(cap).to(torch.float32)
    mask_t = torch.from_numpy(neighbors.mask)
    has_c = torch.from_numpy((cloud.has_color[idx] & neighbors.mask).astype(np.float32))
    has_a = torch.from_numpy((cloud.has_capture[idx] & neighbors.mask).astype(np.float32))
    feats = assemble_features(
        torch.from_numpy(neighbors.canonical_points).to(torch.float32)[None],
        colors[None] * mask_t[None, :, None],
        cap_t[None] * mask_t[None, :, None],
        has_c[None], has_a[None])
    return model.embed(feats, mask_t[None])[0]


def _blockdiag_rotation(rotation: np.ndarray) -> np.ndarray:
    """(12, 12) block-diagonal rotation acting on stacked capture features."""
    out = np.zeros((12, 12))
    for i in range(4):
        out[3 * i:3 * i + 3, 3 * i:3 * i + 3] = rotation.T
    return out
