"""Event propagation under a flow field and rasterization of the result."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import chunked_sum
from .events import EventSlice
from .voxel import axis_corners, scale_timestamps

WEIGHT_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense per-pixel flow in pixels/bin, indexed ``[row, col]``."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError(f"u and v must be equal-shaped 2-D arrays, got {u.shape} and {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("flow contains non-finite values")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @classmethod
    def constant(cls, u: float, v: float, H: int, W: int) -> "FlowField":
        return cls(np.full((H, W), float(u)), np.full((H, W), float(v)))

    @classmethod
    def zeros(cls, H: int, W: int) -> "FlowField":
        return cls.constant(0.0, 0.0, H, W)

    def scaled(self, factor: float) -> "FlowField":
        return FlowField(self.u * factor, self.v * factor, self.valid)

    def save(self, path) -> None:
        np.save(path, np.stack([self.u, self.v]))

    @classmethod
    def load(cls, path) -> "FlowField":
        a = np.load(path)
        if a.ndim != 3 or a.shape[0] != 2:
            raise ValueError(f"{path}: expected a (2, H, W) array, got {a.shape}")
        return cls(a[0], a[1])


@dataclass(frozen=True, eq=False)
class WarpedEvents:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray  # normalized timestamps in [0, 1]
    p: np.ndarray
    t_prime: float
    dt: np.ndarray  # t' - t*, bins; d(x')/d(u) per event

    def __len__(self) -> int:
        return len(self.x)


@dataclass(frozen=True, eq=False)
class TimestampImages:
    T_plus: np.ndarray
    T_minus: np.ndarray
    weight_plus: np.ndarray
    weight_minus: np.ndarray


def flow_sample_weights(H: int, W: int, x, y):
    """Flat indices and weights of the 4 bilinear taps (border clamped)."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0, W - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0, H - 1)
    x0 = np.minimum(np.floor(x), max(W - 2, 0))
    y0 = np.minimum(np.floor(y), max(H - 2, 0))
    fx, fy = x - x0, y - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    x1, y1 = np.minimum(x0 + 1, W - 1), np.minimum(y0 + 1, H - 1)
    idx = np.stack([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1])
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    return idx, w


def sample_flow(flow: FlowField, x, y):
    """Bilinear lookup of (u, v) at real-valued pixel positions."""
    scalar = np.ndim(x) == 0 and np.ndim(y) == 0
    idx, w = flow_sample_weights(flow.height, flow.width, np.atleast_1d(x), np.atleast_1d(y))
    u = np.sum(flow.u.ravel()[idx] * w, axis=0)
    v = np.sum(flow.v.ravel()[idx] * w, axis=0)
    if scalar:
        return float(u[0]), float(v[0])
    return u, v


def scatter_to_field(H: int, W: int, idx, w, g) -> np.ndarray:
    """Adjoint of bilinear sampling: push per-sample gradients back to pixels."""
    return np.bincount(idx.ravel(), weights=(w * g[None, :]).ravel(), minlength=H * W).reshape(H, W)


def propagate_events(slice: EventSlice, flow: FlowField, t_prime: float, B: int,
                     window: tuple[float, float] | None = None) -> WarpedEvents:
    """Move every event along its flow to reference time ``t_prime`` (bins)."""
    ts = scale_timestamps(slice, B, window)
    u, v = sample_flow(flow, slice.x, slice.y) if len(slice) else (np.zeros(0), np.zeros(0))
    dt = t_prime - ts
    s = ts / (B - 1) if B > 1 else np.zeros_like(ts)
    return WarpedEvents(slice.x + dt * u, slice.y + dt * v, s, slice.p.astype(np.int8), float(t_prime), dt)


def splat_corners(x, y, H: int, W: int):
    """The four raster taps of each point.

    Returns flat pixel index, weight, d(weight)/dx, d(weight)/dy and an
    in-frame mask, each of shape (4, N).
    """
    ix, kx, dkx, inx = axis_corners(x, W)
    iy, ky, dky, iny = axis_corners(y, H)
    flat = np.empty((4, len(x)), dtype=np.int64)
    w = np.empty((4, len(x)))
    wx = np.empty_like(w)
    wy = np.empty_like(w)
    ok = np.empty((4, len(x)), dtype=bool)
    for j, (a, b) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
        flat[j] = iy[b] * W + ix[a]
        w[j] = kx[a] * ky[b]
        wx[j] = dkx[a] * ky[b]
        wy[j] = kx[a] * dky[b]
        ok[j] = inx[a] & iny[b]
    flat[~ok] = 0
    w[~ok] = 0.0
    wx[~ok] = 0.0
    wy[~ok] = 0.0
    return flat, w, wx, wy, ok


def accumulate(x, y, values, H: int, W: int) -> np.ndarray:
    """Bilinear splat of per-point ``values`` into an H x W image."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(x) == 0:
        return np.zeros((H, W))

    def part(lo, hi):
        flat, w, _, _, _ = splat_corners(x[lo:hi], y[lo:hi], H, W)
        return np.bincount(flat.ravel(), weights=(w * values[None, lo:hi]).ravel(), minlength=H * W)

    return chunked_sum(part, len(x)).reshape(H, W)


def timestamp_images(w: WarpedEvents, H: int, W: int) -> TimestampImages:
    """Per-polarity average normalized timestamp of the warped events."""
    out = []
    for sign in (1, -1):
        m = w.p == sign
        den = accumulate(w.x[m], w.y[m], np.ones(int(m.sum())), H, W)
        num = accumulate(w.x[m], w.y[m], w.s[m], H, W)
        T = np.divide(num, den, out=np.zeros_like(num), where=den >= WEIGHT_EPS)
        out.append((T, den))
    (Tp, dp), (Tm, dm) = out
    return TimestampImages(Tp, Tm, dp, dm)


def count_image(w: WarpedEvents, H: int, W: int) -> np.ndarray:
    """Number of warped events per pixel, polarity ignored."""
    return accumulate(w.x, w.y, np.ones(len(w)), H, W)
