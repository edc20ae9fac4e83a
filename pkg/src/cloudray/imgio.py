"""PNG and raw float32 image I/O with the standard sRGB transfer."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def linear_to_srgb(linear: np.ndarray) -> np.ndarray:
    x = np.clip(linear, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(srgb: np.ndarray) -> np.ndarray:
    x = np.clip(srgb, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png(path, linear_rgb: np.ndarray) -> None:
    """8-bit PNG, sRGB-encoded from linear radiance (clipped to [0, 1])."""
    img = np.round(linear_to_srgb(linear_rgb) * 255.0).astype(np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Linear RGB float64 in [0, 1] from an sRGB-encoded PNG."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(img)


def load_png_raw(path) -> np.ndarray:
    """PNG as stored (no transfer decode), float64 in [0, 1]."""
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_f32(path, data: np.ndarray) -> None:
    """Little-endian float32 planes with a JSON sidecar {width, height, channels}."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        data = data[..., None]
    h, w, c = data.shape
    with open(path, "wb") as fh:
        fh.write(data.tobytes())
    with open(str(path) + ".json", "w") as fh:
        json.dump({"width": w, "height": h, "channels": c}, fh)


def load_f32(path) -> np.ndarray:
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    data = np.fromfile(path, dtype="<f4")
    arr = data.reshape(meta["height"], meta["width"], meta["channels"])
    return arr[..., 0] if meta["channels"] == 1 else arr


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
