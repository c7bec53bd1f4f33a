"""Deblurring, regularization and stereo objectives.

Every loss has a plain value function and, where the optimizer needs it, a
``*_grad`` twin returning the value together with its gradient.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .egomotion import DisparityField, Pose, pose_disparity_to_flow
from .events import EventSlice, StereoRig
from .warp import (
    WEIGHT_EPS,
    FlowField,
    WarpedEvents,
    count_image,
    flow_sample_weights,
    propagate_events,
    scatter_to_field,
    splat_corners,
    timestamp_images,
)

DEFAULT_EPS = 1e-3
DEFAULT_CENSUS_WINDOW = 5
DEFAULT_WEIGHTS = (1.0, 1.0, 0.1, 0.2)

TERM_ORDER = ("time", "smooth", "stereo", "consistency", "variance")


@dataclass
class LossReport:
    total: float
    terms: dict[str, float]
    weights: dict[str, float]
    gradient: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def combine(cls, terms: dict[str, float], weights: dict[str, float]) -> "LossReport":
        total = 0.0
        for name in TERM_ORDER:
            if name in terms:
                total += weights.get(name, 1.0) * terms[name]
        return cls(float(total), dict(terms), dict(weights))

    def to_dict(self) -> dict:
        d = {"total": self.total, "terms": self.terms, "weights": self.weights}
        if self.gradient is not None:
            d["gradient"] = np.asarray(self.gradient).tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def charbonnier(x, eps: float = DEFAULT_EPS):
    return np.sqrt(np.square(x) + eps * eps)


def charbonnier_grad(x, eps: float = DEFAULT_EPS):
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(x * x + eps * eps)


# -- temporal ---------------------------------------------------------------

def time_loss_at(w: WarpedEvents, H: int, W: int) -> float:
    """Sum of squared per-polarity average-timestamp images."""
    ti = timestamp_images(w, H, W)
    return float(np.sum(ti.T_plus**2) + np.sum(ti.T_minus**2))


def time_loss_at_grad(w: WarpedEvents, H: int, W: int):
    """Value and gradient w.r.t. each warped event position (x', y')."""
    n = len(w)
    gx = np.zeros(n)
    gy = np.zeros(n)
    if n == 0:
        return 0.0, gx, gy
    flat, k, kx, ky, _ = splat_corners(w.x, w.y, H, W)
    total = 0.0
    for sign in (1, -1):
        m = w.p == sign
        if not m.any():
            continue
        f, kk = flat[:, m], k[:, m]
        den = np.bincount(f.ravel(), weights=kk.ravel(), minlength=H * W)
        num = np.bincount(f.ravel(), weights=(kk * w.s[m][None, :]).ravel(), minlength=H * W)
        ok = den >= WEIGHT_EPS
        T = np.divide(num, den, out=np.zeros_like(num), where=ok)
        total += float(np.sum(T * T))
        # dL/dk_i(pix) = 2 T (s_i - T) / D
        coef = np.where(ok[f], 2.0 * T[f] * (w.s[m][None, :] - T[f]) / np.where(ok, den, 1.0)[f], 0.0)
        gx[m] = np.sum(coef * kx[:, m], axis=0)
        gy[m] = np.sum(coef * ky[:, m], axis=0)
    return total, gx, gy


def _reference_times(B: int):
    return (0.0, float(B - 1))


def time_loss(slice: EventSlice, flow: FlowField, B: int = 9, window=None) -> float:
    """Temporal loss summed over the forward (t'=0) and backward (t'=B-1) warps."""
    if B < 2:
        raise ValueError("B must be >= 2")
    H, W = flow.shape
    return sum(time_loss_at(propagate_events(slice, flow, tp, B, window), H, W) for tp in _reference_times(B))


def _event_grad_to_field(slice, flow, w, gx, gy):
    """Chain per-event position gradients through the event warp to the flow field."""
    H, W = flow.shape
    idx, wt = flow_sample_weights(H, W, slice.x, slice.y)
    dU = scatter_to_field(H, W, idx, wt, gx * w.dt)
    dV = scatter_to_field(H, W, idx, wt, gy * w.dt)
    return dU, dV


def time_loss_grad(slice: EventSlice, flow: FlowField, B: int = 9, window=None):
    """``(loss, dL/du, dL/dv)`` with field gradients of shape (H, W)."""
    if B < 2:
        raise ValueError("B must be >= 2")
    H, W = flow.shape
    total = 0.0
    dU = np.zeros((H, W))
    dV = np.zeros((H, W))
    if len(slice) == 0:
        return total, dU, dV
    for tp in _reference_times(B):
        w = propagate_events(slice, flow, tp, B, window)
        val, gx, gy = time_loss_at_grad(w, H, W)
        total += val
        a, b = _event_grad_to_field(slice, flow, w, gx, gy)
        dU += a
        dV += b
    return total, dU, dV


# -- contrast (image variance) ---------------------------------------------

def _blur(img, sigma: float):
    # zero padding keeps the operator symmetric, so it is its own adjoint
    return gaussian_filter(img, sigma, mode="constant", truncate=3.0) if sigma > 0 else img


def variance_loss(w: WarpedEvents, H: int, W: int, sigma: float = 0.0) -> float:
    """Negative variance of the warped count image; lower means sharper.

    ``sigma`` > 0 blurs the count image first, which widens the basin.
    Minimizing it with a dense flow lets the model squeeze the events of a
    region onto a line; low-dimensional motion models do not have that
    freedom.
    """
    if len(w) == 0:
        return 0.0
    return -float(np.var(_blur(count_image(w, H, W), sigma)))


def variance_loss_grad(w: WarpedEvents, H: int, W: int, sigma: float = 0.0):
    n = len(w)
    if n == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    flat, k, kx, ky, _ = splat_corners(w.x, w.y, H, W)
    C = _blur(np.bincount(flat.ravel(), weights=k.ravel(), minlength=H * W).reshape(H, W), sigma)
    dC = _blur(-2.0 * (C - C.mean()) / C.size, sigma).ravel()
    return -float(np.var(C)), np.sum(dC[flat] * kx, axis=0), np.sum(dC[flat] * ky, axis=0)


def variance_objective_grad(slice: EventSlice, flow: FlowField, B: int = 9, window=None, sigma: float = 0.0):
    """Variance loss summed over both reference times, with field gradients."""
    H, W = flow.shape
    total = 0.0
    dU = np.zeros((H, W))
    dV = np.zeros((H, W))
    if len(slice) == 0:
        return total, dU, dV
    for tp in _reference_times(B):
        w = propagate_events(slice, flow, tp, B, window)
        val, gx, gy = variance_loss_grad(w, H, W, sigma)
        total += val
        a, b = _event_grad_to_field(slice, flow, w, gx, gy)
        dU += a
        dV += b
    return total, dU, dV


# -- smoothness -------------------------------------------------------------

def image_smoothness_grad(img, eps: float = DEFAULT_EPS):
    """Charbonnier of 4-neighbour differences, each unordered pair once."""
    img = np.asarray(img, dtype=np.float64)
    dx = img[:, 1:] - img[:, :-1]
    dy = img[1:, :] - img[:-1, :]
    val = float(np.sum(charbonnier(dx, eps)) + np.sum(charbonnier(dy, eps)))
    gx = charbonnier_grad(dx, eps)
    gy = charbonnier_grad(dy, eps)
    g = np.zeros_like(img)
    g[:, 1:] += gx
    g[:, :-1] -= gx
    g[1:, :] += gy
    g[:-1, :] -= gy
    return val, g


def smoothness_loss(flow: FlowField, eps: float = DEFAULT_EPS) -> float:
    return smoothness_grad(flow, eps)[0]


def smoothness_grad(flow: FlowField, eps: float = DEFAULT_EPS):
    vu, gu = image_smoothness_grad(flow.u, eps)
    vv, gv = image_smoothness_grad(flow.v, eps)
    return vu + vv, gu, gv


# -- census stereo ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CensusImage:
    desc: np.ndarray  # (H, W, window**2), entries in {-1, 0, 1}
    window: int


def census_transform(img, W_c: int = DEFAULT_CENSUS_WINDOW) -> CensusImage:
    """sign(center - neighbour) over a W_c x W_c window; out-of-frame -> 0."""
    if W_c < 3 or W_c % 2 == 0:
        raise ValueError("census window must be odd and >= 3")
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    r = W_c // 2
    padded = np.pad(img, r, mode="constant", constant_values=np.nan)
    desc = np.zeros((H, W, W_c * W_c), dtype=np.int8)
    k = 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            nb = padded[r + dy:r + dy + H, r + dx:r + dx + W]
            with np.errstate(invalid="ignore"):
                s = np.sign(img - nb)
            desc[:, :, k] = np.where(np.isnan(nb), 0, s).astype(np.int8)
            k += 1
    return CensusImage(desc, W_c)


def _sample_rows(img, xs):
    """Linear interpolation of ``img[y, x, ...]`` at real ``xs[y, x]`` along each row.

    Returns ``(values, slope, valid, x0, frac)``; samples outside [0, W-1]
    are invalid and read as 0.
    """
    H, W = xs.shape
    valid = (xs >= 0) & (xs <= W - 1)
    xc = np.clip(xs, 0, W - 1)
    x0 = np.minimum(np.floor(xc), max(W - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    frac = xc - x0
    rows = np.arange(H)[:, None]
    a = img[rows, x0]
    b = img[rows, x1]
    if img.ndim == 3:
        f = frac[..., None]
        vals = (1 - f) * a + f * b
        vals[~valid] = 0
    else:
        vals = np.where(valid, (1 - frac) * a + frac * b, 0.0)
    return vals, b - a, valid, x0, frac


def _xgrid(H, W):
    return np.broadcast_to(np.arange(W, dtype=np.float64), (H, W))


def census_stereo_loss(left_count, right_count, disp_left: DisparityField, disp_right: DisparityField,
                       W_c: int = DEFAULT_CENSUS_WINDOW, eps: float = DEFAULT_EPS) -> float:
    return census_stereo_grad(left_count, right_count, disp_left, disp_right, W_c, eps)[0]


def census_stereo_grad(left_count, right_count, disp_left, disp_right,
                       W_c: int = DEFAULT_CENSUS_WINDOW, eps: float = DEFAULT_EPS):
    """Census loss and gradients w.r.t. both disparity maps.

    Census signs are treated as constants of the images, so only the
    disparity-dependent sampling is differentiated.
    """
    left_count = np.asarray(left_count, dtype=np.float64)
    right_count = np.asarray(right_count, dtype=np.float64)
    if left_count.shape != right_count.shape:
        raise ValueError("stereo images differ in shape")
    H, W = left_count.shape
    CL = census_transform(left_count, W_c).desc.astype(np.float64)
    CR = census_transform(right_count, W_c).desc.astype(np.float64)
    dL, dR = _disp(disp_left), _disp(disp_right)
    xg = _xgrid(H, W)

    # right census seen from the left camera, then the mirrored term
    CRs, slopeR, okL, _, _ = _sample_rows(CR, xg - dL)
    diffL = CL - CRs
    rhoL = charbonnier(diffL, eps)
    gL = np.where(okL, np.sum(charbonnier_grad(diffL, eps) * slopeR, axis=2), 0.0)

    CLs, slopeL, okR, _, _ = _sample_rows(CL, xg + dR)
    diffR = CR - CLs
    rhoR = charbonnier(diffR, eps)
    gR = np.where(okR, -np.sum(charbonnier_grad(diffR, eps) * slopeL, axis=2), 0.0)

    val = float(np.sum(rhoL[okL]) + np.sum(rhoR[okR]))
    return val, gL, gR


def _disp(d):
    return d.d if isinstance(d, DisparityField) else np.asarray(d, dtype=np.float64)


def lr_consistency_loss(disp_left, disp_right, eps: float = DEFAULT_EPS) -> float:
    return lr_consistency_grad(disp_left, disp_right, eps)[0]


def lr_consistency_grad(disp_left, disp_right, eps: float = DEFAULT_EPS):
    dL, dR = _disp(disp_left), _disp(disp_right)
    if dL.shape != dR.shape:
        raise ValueError("disparity maps differ in shape")
    H, W = dL.shape
    xg = _xgrid(H, W)
    rows = np.broadcast_to(np.arange(H)[:, None], (H, W))
    gL = np.zeros((H, W))
    gR = np.zeros((H, W))
    val = 0.0
    # (own map, other map, sample offset sign, grad of own, grad of other)
    for own, other, sgn, g_own, g_other in ((dL, dR, -1.0, gL, gR), (dR, dL, 1.0, gR, gL)):
        s, slope, ok, x0, frac = _sample_rows(other, xg + sgn * own)
        r = own - s
        val += float(np.sum(charbonnier(r[ok], eps)))
        c = np.where(ok, charbonnier_grad(r, eps), 0.0)
        g_own += c * (1.0 - sgn * slope)
        x1 = np.minimum(x0 + 1, W - 1)
        np.add.at(g_other, (rows, x0), -c * (1 - frac))
        np.add.at(g_other, (rows, x1), -c * frac)
    return val, gL, gR


# -- totals -----------------------------------------------------------------

def total_flow_loss(slice: EventSlice, flow: FlowField, lam1: float = DEFAULT_WEIGHTS[0],
                    eps: float = DEFAULT_EPS, B: int = 9, window=None) -> LossReport:
    if lam1 < 0:
        raise ValueError("lambda_1 must be >= 0")
    terms = {"time": time_loss(slice, flow, B, window), "smooth": smoothness_loss(flow, eps)}
    return LossReport.combine(terms, {"time": 1.0, "smooth": lam1})


def common_window(*slices: EventSlice):
    live = [s for s in slices if len(s)]
    if not live:
        return (0.0, 0.0)
    return (min(s.t0 for s in live), max(s.tN for s in live))


def total_sfm_loss(left_slice: EventSlice, right_slice: EventSlice, pose: Pose,
                   disp_left: DisparityField, disp_right: DisparityField, rig: StereoRig,
                   B: int = 9, lam2: float = DEFAULT_WEIGHTS[1], lam3: float = DEFAULT_WEIGHTS[2],
                   lam4: float = DEFAULT_WEIGHTS[3], eps: float = DEFAULT_EPS,
                   W_c: int = DEFAULT_CENSUS_WINDOW) -> LossReport:
    """Temporal loss of both cameras plus weighted stereo terms.

    Both cameras share one pose.  Stereo images are the event counts after
    warping to t' = 0.
    """
    if min(lam2, lam3, lam4) < 0:
        raise ValueError("loss weights must be >= 0")
    window = common_window(left_slice, right_slice)
    flow_l = pose_disparity_to_flow(pose, disp_left, rig.left, rig.baseline_m, B)
    flow_r = pose_disparity_to_flow(pose, disp_right, rig.right, rig.baseline_m, B)
    H, W = flow_l.shape
    temporal = time_loss(left_slice, flow_l, B, window) + time_loss(right_slice, flow_r, B, window)
    cl = count_image(propagate_events(left_slice, flow_l, 0.0, B, window), H, W)
    cr = count_image(propagate_events(right_slice, flow_r, 0.0, B, window), H, W)
    terms = {
        "time": temporal,
        "stereo": census_stereo_loss(cl, cr, disp_left, disp_right, W_c, eps),
        "consistency": lr_consistency_loss(disp_left, disp_right, eps),
        "smooth": image_smoothness_grad(disp_left.d, eps)[0] + image_smoothness_grad(disp_right.d, eps)[0],
    }
    return LossReport.combine(terms, {"time": 1.0, "stereo": lam2, "consistency": lam3, "smooth": lam4})
