"""The learned cloud-ray intersection operator.

A small MLP lifts per-point records (canonical position, color, capture
features, validity flags) to d-dimensional tokens; a learned query token is
prepended and the sequence runs through transformer blocks *without layer
normalization*, SiLU activations, and no positional encoding.  The query
token's output feeds linear heads for travel distance (measured from the
canonical z=0 plane), raw surface normal, and hit logit; a final multi-head
attention with the query token against the point tokens supplies the
material blending weights as its attention distribution.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

MAGIC = b"PTRS"
VERSION = 1

DEFAULT_FEATURE_LAYOUT = (
    ("position", 3),
    ("color", 3),
    ("ray_dir", 3),
    ("du", 3),
    ("dv", 3),
    ("cam_axis", 3),
    ("has_color", 1),
    ("has_capture", 1),
)


class NumericError(RuntimeError):
    """Raised when the network produces non-finite outputs."""


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 128
    dropout_p: float = 0.1
    feature_layout: tuple = DEFAULT_FEATURE_LAYOUT

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        layout = tuple((str(n), int(w)) for n, w in self.feature_layout)
        object.__setattr__(self, "feature_layout", layout)

    @property
    def feature_dim(self) -> int:
        return sum(w for _, w in self.feature_layout)


@dataclass(frozen=True)
class LossWeights:
    lambda_t: float = 10.0

    def __post_init__(self):
        if self.lambda_t <= 0:
            raise ValueError("lambda_t must be positive")


class ModelOutput(NamedTuple):
    hit_prob: torch.Tensor   # (B,)
    t: torch.Tensor          # (B,), distance from the canonical z=0 plane
    normal: torch.Tensor     # (B, 3), unit, canonical frame
    weights: torch.Tensor    # (B, K), blending distribution over valid entries


def _dropout(x: torch.Tensor, p: float, rng: torch.Generator | None) -> torch.Tensor:
    if p <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=rng, device=x.device, dtype=x.dtype) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


class _Block(nn.Module):
    """Pre-activation-free transformer block: MHA + FFN with residuals, no norms."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.heads = cfg.heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ffn1 = nn.Linear(d, cfg.ffn_dim)
        self.ffn2 = nn.Linear(cfg.ffn_dim, d)
        self.p = cfg.dropout_p

    def forward(self, x, key_mask, train_mode, rng):
        b, n, d = x.shape
        h = self.heads
        dh = d // h
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.view(b, n, h, dh).transpose(1, 2)
        k = k.view(b, n, h, dh).transpose(1, 2)
        v = v.view(b, n, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / np.sqrt(dh)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        if train_mode:
            probs = _dropout(probs, self.p, rng)
        attn = (probs @ v).transpose(1, 2).reshape(b, n, d)
        attn = self.proj(attn)
        if train_mode:
            attn = _dropout(attn, self.p, rng)
        x = x + attn
        ff = self.ffn2(nn.functional.silu(self.ffn1(x)))
        if train_mode:
            ff = _dropout(ff, self.p, rng)
        return x + ff


class CloudRayModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.embed1 = nn.Linear(cfg.feature_dim, d)
        self.embed2 = nn.Linear(d, d)
        self.token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.layers))
        self.head_t = nn.Linear(d, 1)
        self.head_n = nn.Linear(d, 3)
        self.head_h = nn.Linear(d, 1)
        self.blend_q = nn.Linear(d, d)
        self.blend_k = nn.Linear(d, d)

    def embed(self, features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Point records (B, K, F) -> token sequence (B, K+1, d), query token first."""
        x = self.embed2(nn.functional.silu(self.embed1(features)))
        tok = self.token.to(x.dtype).expand(x.shape[0], 1, -1)
        return torch.cat([tok, x], dim=1)

    def forward(self, features: torch.Tensor, mask: torch.Tensor,
                train_mode: bool = False,
                rng: torch.Generator | None = None) -> ModelOutput:
        """Run the operator on embedded neighbor records.

        ``mask`` is (B, K) with True for real entries; padded slots never
        receive attention.  Callers must not invoke with all-empty masks; the
        renderer short-circuits those rays to a miss.
        """
        if train_mode and self.cfg.dropout_p > 0 and rng is None:
            raise ValueError("train_mode forward requires an rng for dropout")
        x = self.embed(features, mask)
        key_mask = torch.cat(
            [torch.ones(mask.shape[0], 1, dtype=torch.bool, device=mask.device), mask],
            dim=1)
        for block in self.blocks:
            x = block(x, key_mask, train_mode, rng)
        tok = x[:, 0]
        t = self.head_t(tok).squeeze(-1)
        n_raw = self.head_n(tok)
        normal = n_raw / torch.linalg.norm(n_raw, dim=-1, keepdim=True).clamp_min(1e-12)
        h = torch.sigmoid(self.head_h(tok).squeeze(-1))

        d = self.cfg.dim
        nh = self.cfg.heads
        dh = d // nh
        q = self.blend_q(tok).view(-1, nh, 1, dh)
        k = self.blend_k(x[:, 1:]).view(x.shape[0], -1, nh, dh).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)).squeeze(2) / np.sqrt(dh)
        scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        w = torch.softmax(scores, dim=-1).mean(dim=1)
        w = torch.where(mask, w, torch.zeros((), dtype=w.dtype))
        w = w / w.sum(dim=-1, keepdim=True).clamp_min(1e-12)

        for name, out in (("hit", h), ("t", t), ("normal", normal), ("weights", w)):
            if not torch.isfinite(out).all():
                raise NumericError(
                    f"non-finite {name} in model output "
                    f"(features range [{features.min():.3g}, {features.max():.3g}])")
        return ModelOutput(h, t, normal, w)


def init_params(cfg: ModelConfig, seed: int = 0) -> CloudRayModel:
    """Deterministic initialization: linear weights and biases uniform in
    +-1/sqrt(fan_in), learned token normal(0, 0.02)."""
    model = CloudRayModel(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / np.sqrt(module.in_features)
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.uniform_(-bound, bound, generator=gen)
        model.token.normal_(0.0, 0.02, generator=gen)
    return model


def assemble_features(canonical: torch.Tensor, colors: torch.Tensor,
                      capture: torch.Tensor, has_color: torch.Tensor,
                      has_capture: torch.Tensor) -> torch.Tensor:
    """Concatenate the per-point record in the fixed layout order.

    ``capture`` is (B, K, 12): ray_dir, du, dv, cam_axis already rotated into
    the canonical frame.  Flag tensors are (B, K) in {0, 1}.
    """
    return torch.cat([canonical, colors, capture,
                      has_color[..., None], has_capture[..., None]], dim=-1)


def blended_color(weights: torch.Tensor, colors: torch.Tensor) -> torch.Tensor:
    """Convex combination of neighbor colors; padded slots carry zero weight."""
    return (weights[..., None] * colors).sum(dim=-2)


def training_loss(pred: ModelOutput, gt_hit: torch.Tensor, gt_t: torch.Tensor,
                  gt_normal: torch.Tensor, gt_color: torch.Tensor,
                  neighbor_colors: torch.Tensor,
                  weights: LossWeights = LossWeights()):
    """Hit-gated geometric terms plus hit cross-entropy.

    total = mean over rays of
        gt_hit * (lambda (t - t_gt)^2 + |n x n_gt|^2 + |c - c_gt|_1) + BCE(h, gt_hit)
    with the color c blended from neighbor colors by the predicted weights and
    h clamped to [1e-7, 1 - 1e-7].  Every term is nonnegative.
    """
    hit = gt_hit.to(pred.t.dtype)
    t_term = (pred.t - gt_t) ** 2
    n_term = torch.linalg.cross(pred.normal, gt_normal).pow(2).sum(dim=-1)
    color = blended_color(pred.weights, neighbor_colors)
    c_term = (color - gt_color).abs().sum(dim=-1)
    h = pred.hit_prob.clamp(1e-7, 1.0 - 1e-7)
    bce = -(hit * torch.log(h) + (1.0 - hit) * torch.log(1.0 - h))
    gated = hit * (weights.lambda_t * t_term + n_term + c_term)
    total = (gated + bce).mean()
    with torch.no_grad():
        breakdown = {
            "t": float((hit * t_term).mean()),
            "normal": float((hit * n_term).mean()),
            "color": float((hit * c_term).mean()),
            "bce": float(bce.mean()),
            "total": float(total),
        }
    return total, breakdown


def lr_schedule(step: int, peak: float, warmup: int) -> float:
    """Linear ramp to ``peak`` over ``warmup`` steps, then inverse-sqrt decay."""
    if step < 1:
        raise ValueError("step index starts at 1")
    return peak * min(step / warmup, np.sqrt(warmup / step))


@dataclass
class AdamState:
    m: dict
    v: dict

    @staticmethod
    def for_model(model: nn.Module) -> "AdamState":
        zeros = {k: torch.zeros_like(p) for k, p in model.named_parameters()}
        return AdamState(m=zeros, v={k: torch.zeros_like(p) for k, p in model.named_parameters()})


@dataclass(frozen=True)
class Schedule:
    peak_lr: float = 1e-4
    warmup: int = 4000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9


@torch.no_grad()
def adam_step(model: nn.Module, state: AdamState, step_index: int,
              schedule: Schedule = Schedule()) -> float:
    """One Adam update over all parameters with gradients; returns the lr used."""
    lr = lr_schedule(step_index, schedule.peak_lr, schedule.warmup)
    b1, b2 = schedule.beta1, schedule.beta2
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        m_hat = m / (1.0 - b1 ** step_index)
        v_hat = v / (1.0 - b2 ** step_index)
        p.add_(-lr * m_hat / (v_hat.sqrt() + schedule.eps))
    return lr


def _config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["feature_layout"] = [list(pair) for pair in cfg.feature_layout]
    return d


def _config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["feature_layout"] = tuple((n, int(w)) for n, w in d["feature_layout"])
    return ModelConfig(**d)


def save_checkpoint(model: CloudRayModel, path) -> None:
    """Binary checkpoint: magic, version byte, length-prefixed JSON header
    (config + tensor table), then raw little-endian float32 payloads in table
    order."""
    state = model.state_dict()
    table = {}
    offset = 0
    blobs = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
        table[name] = {"dtype": "f4", "shape": list(arr.shape), "offset": offset}
        blob = arr.tobytes()
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({"config": _config_to_dict(model.cfg), "tensors": table},
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> CloudRayModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    if data[4] != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {data[4]}")
    hlen = int.from_bytes(data[5:9], "little")
    if 9 + hlen > len(data):
        raise ValueError(f"{path}: truncated checkpoint header")
    header = json.loads(data[9:9 + hlen].decode("utf-8"))
    payload = data[9 + hlen:]
    cfg = _config_from_dict(header["config"])
    model = CloudRayModel(cfg)
    state = {}
    total = 0
    for name, meta in header["tensors"].items():
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        nbytes = count * 4
        total = max(total, meta["offset"] + nbytes)
        if meta["offset"] + nbytes > len(payload):
            raise ValueError(f"{path}: tensor {name} exceeds payload length")
        arr = np.frombuffer(payload, dtype="<f4", count=count,
                            offset=meta["offset"]).reshape(meta["shape"])
        state[name] = torch.from_numpy(arr.copy())
    if total != len(payload):
        raise ValueError(f"{path}: payload length does not match tensor table")
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise ValueError(f"{path}: tensor table mismatch: {sorted(missing)}")
    model.load_state_dict(state)
    return model
