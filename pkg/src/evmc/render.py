"""Image export: grayscale maps and direction-coloured flow."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from .warp import FlowField


def to_gray8(img, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Linearly map ``img`` to uint8; a constant image becomes all zeros."""
    img = np.asarray(img, dtype=np.float64)
    lo = float(np.min(img)) if vmin is None else float(vmin)
    hi = float(np.max(img)) if vmax is None else float(vmax)
    if img.size == 0 or hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    out = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    return np.round(out * 255).astype(np.uint8)


def flow_to_rgb(flow: FlowField, max_magnitude: float | None = None, mask=None) -> np.ndarray:
    """Hue encodes direction, saturation encodes magnitude; value is 1.

    Pixels outside ``mask`` are black.
    """
    ang = np.arctan2(flow.v, flow.u)
    mag = np.hypot(flow.u, flow.v)
    if max_magnitude is None:
        max_magnitude = float(mag.max()) if mag.size else 0.0
    hsv = np.empty(flow.shape + (3,))
    hsv[..., 0] = np.mod(ang, 2 * math.pi) / (2 * math.pi)
    hsv[..., 1] = np.clip(mag / max_magnitude, 0, 1) if max_magnitude > 0 else 0.0
    hsv[..., 2] = 1.0
    rgb = hsv_to_rgb(hsv)
    if mask is not None:
        rgb[~np.asarray(mask, dtype=bool)] = 0.0
    return np.round(rgb * 255).astype(np.uint8)


def save_image(path, arr) -> None:
    """Write a uint8 array; .pgm/.ppm use the binary netpbm formats, anything else via its extension."""
    path = Path(path)
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        arr = to_gray8(arr)
    ext = path.suffix.lower()
    if ext == ".pgm" and arr.ndim != 2:
        raise ValueError("PGM output needs a single-channel image")
    fmt = "PPM" if ext in (".pgm", ".ppm") else None
    Image.fromarray(arr).save(path, format=fmt)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def volume_bins_gray8(volume) -> list[np.ndarray]:
    """One uint8 image per bin on a shared symmetric scale; mid-gray is zero mass."""
    data = np.asarray(volume.data)
    m = float(np.max(np.abs(data))) if data.size else 0.0
    if m == 0:
        return [np.full(b.shape, 128, np.uint8) for b in data]
    return [to_gray8(b, -m, m) for b in data]


def save_volume_pgms(volume, prefix) -> list[str]:
    """Write ``<prefix>_bin<k>.pgm`` for every bin k."""
    paths = []
    for k, img in enumerate(volume_bins_gray8(volume)):
        paths.append(f"{prefix}_bin{k}.pgm")
        save_image(paths[-1], img)
    return paths
