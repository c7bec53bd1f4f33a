"""Discretized event volume with trilinear accumulation."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._parallel import chunked_sum
from .events import EventSlice


class DegenerateWindowWarning(UserWarning):
    pass


def bilinear_kernel(a):
    """max(0, 1 - |a|)."""
    return np.maximum(0.0, 1.0 - np.abs(a))


def bilinear_kernel_grad(a):
    """Derivative of :func:`bilinear_kernel`.

    Kinks: 0 at |a| = 1, and the left limit (+1) at a = 0.
    """
    a = np.asarray(a, dtype=np.float64)
    g = np.where(a < 0, 1.0, -1.0)
    g = np.where(a == 0, 1.0, g)
    return np.where(np.abs(a) < 1, g, 0.0)


def axis_corners(c, n: int):
    """Two integer neighbours of each coordinate in ``c`` along an axis of size ``n``.

    Returns ``(idx, k, dk, inside)``, each of shape (2, len(c)): corner
    index, kernel weight, derivative of the weight w.r.t. ``c`` and whether
    the corner lies in ``[0, n)``.
    """
    c = np.asarray(c, dtype=np.float64)
    c0 = np.floor(c)
    idx = np.stack([c0, c0 + 1.0])
    a = idx - c[None, :]
    k = bilinear_kernel(a)
    dk = -bilinear_kernel_grad(a)
    inside = (idx >= 0) & (idx <= n - 1)
    return idx.astype(np.int64), k, dk, inside


def scale_timestamps(slice: EventSlice, B: int, window: tuple[float, float] | None = None) -> np.ndarray:
    """Map event times linearly onto [0, B-1] (first event -> 0, last -> B-1)."""
    if B < 1:
        raise ValueError("B must be >= 1")
    t0, tN = window if window is not None else (slice.t0, slice.tN)
    if tN <= t0:
        if len(slice) > 1:
            warnings.warn("zero-duration window; all scaled timestamps set to 0", DegenerateWindowWarning, stacklevel=2)
        return np.zeros(len(slice))
    return (B - 1) * (slice.t - t0) / (tN - t0)


@dataclass(frozen=True, eq=False)
class EventVolume:
    data: np.ndarray  # (B, H, W), bin-major
    dropped: int = 0

    @property
    def bins(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _splat_volume(x, y, ts, p, B, H, W):
    ix, kx, _, inx = axis_corners(x, W)
    iy, ky, _, iny = axis_corners(y, H)
    ib, kb, _, inb = axis_corners(ts, B)
    flat, vals = [], []
    for a in range(2):
        for b in range(2):
            for c in range(2):
                ok = inb[a] & iny[b] & inx[c]
                w = p * kb[a] * ky[b] * kx[c]
                flat.append(((ib[a] * H + iy[b]) * W + ix[c])[ok])
                vals.append(w[ok])
    flat = np.concatenate(flat)
    vals = np.concatenate(vals)
    return np.bincount(flat, weights=vals, minlength=B * H * W)


def build_volume(slice: EventSlice, B: int = 9, H: int = 256, W: int = 256,
                 window: tuple[float, float] | None = None) -> EventVolume:
    if B < 1 or H < 1 or W < 1:
        raise ValueError("B, H, W must all be >= 1")
    ts = scale_timestamps(slice, B, window)
    x, y = slice.x, slice.y
    p = slice.p.astype(np.float64)
    dropped = int(np.count_nonzero((x <= -1) | (x >= W) | (y <= -1) | (y >= H)))

    def part(lo, hi):
        return _splat_volume(x[lo:hi], y[lo:hi], ts[lo:hi], p[lo:hi], B, H, W)

    data = chunked_sum(part, len(slice)) if len(slice) else np.zeros(B * H * W)
    return EventVolume(data.reshape(B, H, W), dropped)


def decode_sparse_volume(volume: EventVolume) -> np.ndarray:
    """Recover events from a volume in which no two events share support.

    Every connected group of nonzero voxels is treated as one event; its
    position is the weight-averaged voxel coordinate.  Returns an array with
    columns ``(x, y, t*, p)`` sorted by (t*, y, x).
    """
    data = volume.data
    labels, n = ndimage.label(data != 0, structure=np.ones((3, 3, 3)))
    if n == 0:
        return np.zeros((0, 4))
    idx = np.arange(1, n + 1)
    mass = np.abs(data)
    total = ndimage.sum(mass, labels, idx)
    signed = ndimage.sum(data, labels, idx)
    bb, yy, xx = np.indices(data.shape, dtype=np.float64)
    x = ndimage.sum(mass * xx, labels, idx) / total
    y = ndimage.sum(mass * yy, labels, idx) / total
    t = ndimage.sum(mass * bb, labels, idx) / total
    out = np.column_stack([x, y, t, np.sign(signed)])
    return out[np.lexsort((out[:, 0], out[:, 1], out[:, 2]))]


_HEADER = struct.Struct("<3i")


def save_volume(volume: EventVolume, path) -> None:
    """Flat binary: int32 B, H, W then float64 data in row-major order."""
    with open(path, "wb") as f:
        f.write(_HEADER.pack(*volume.data.shape))
        f.write(np.ascontiguousarray(volume.data, dtype="<f8").tobytes())


def load_volume(path) -> EventVolume:
    raw = open(path, "rb").read()
    B, H, W = _HEADER.unpack_from(raw)
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != B * H * W:
        raise ValueError(f"{path}: expected {B * H * W} values, found {data.size}")
    return EventVolume(data.reshape(B, H, W).copy())
