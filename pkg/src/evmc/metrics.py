"""Evaluation measures: flow units, endpoint error, depth error, pose errors."""
from __future__ import annotations

import math

import numpy as np

from .warp import FlowField

OUTLIER_PX = 3.0
DEPTH_THRESHOLDS = (10.0, 20.0, 30.0)
ORTHO_TOL = 1e-6


def flow_to_displacement(flow: FlowField, B: int, dt: float, window) -> FlowField:
    """Convert px/bin to a pixel displacement over ``dt`` seconds."""
    t0, tN = (float(w) for w in window)
    if not tN > t0:
        raise ValueError(f"window must have positive duration, got ({t0}, {tN})")
    if not dt > 0:
        raise ValueError("dt must be > 0")
    return flow.scaled((B - 1) * dt / (tN - t0))


def _mask_of(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match {shape}")
    return mask


def endpoint_errors(pred: FlowField, gt: FlowField, mask=None) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"flow shapes differ: {pred.shape} vs {gt.shape}")
    m = _mask_of(mask, pred.shape)
    return np.hypot(pred.u - gt.u, pred.v - gt.v)[m]


def aee(pred: FlowField, gt: FlowField, mask=None) -> tuple[float, float]:
    """Average endpoint error and the fraction of masked pixels above 3 px."""
    e = endpoint_errors(pred, gt, mask)
    if e.size == 0:
        raise ValueError("AEE is undefined on an empty mask")
    return float(e.mean()), float(np.mean(e > OUTLIER_PX))


def event_mask(slice, H: int, W: int) -> np.ndarray:
    """Pixels with at least one event (nearest pixel of each event)."""
    m = np.zeros((H, W), dtype=bool)
    if len(slice):
        x = np.rint(slice.x).astype(np.int64)
        y = np.rint(slice.y).astype(np.int64)
        ok = (x >= 0) & (x < W) & (y >= 0) & (y < H)
        m[y[ok], x[ok]] = True
    return m


def depth_error(pred, gt, mask=None, thresholds=DEPTH_THRESHOLDS) -> dict[float, float | None]:
    """Mean absolute depth error over pixels with gt <= D, per threshold D.

    A threshold with no selected pixel maps to None.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"depth shapes differ: {pred.shape} vs {gt.shape}")
    m = _mask_of(mask, gt.shape) & np.isfinite(gt)
    out = {}
    for D in thresholds:
        sel = m & (gt <= D)
        out[float(D)] = float(np.mean(np.abs(pred[sel] - gt[sel]))) if sel.any() else None
    return out


def rpe(t_pred, t_gt) -> float:
    """Angle (rad) between two translation directions."""
    a = np.asarray(t_pred, dtype=np.float64)
    b = np.asarray(t_gt, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("translation direction undefined for a zero vector")
    c = float(a @ b) / (na * nb)
    return math.acos(min(1.0, max(-1.0, c)))


def _check_rotation(R, name):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3")
    if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise ValueError(f"{name} is not a rotation matrix (orthonormality tolerance {ORTHO_TOL})")
    return R


def log_rotation(R) -> np.ndarray:
    """Matrix logarithm of a rotation, via axis-angle."""
    R = np.asarray(R, dtype=np.float64)
    skew = (R - R.T) / 2.0
    # atan2 keeps precision near both 0 and pi, where acos of the trace does not
    sin_t = math.sqrt(skew[2, 1] ** 2 + skew[0, 2] ** 2 + skew[1, 0] ** 2)
    theta = math.atan2(sin_t, (np.trace(R) - 1.0) / 2.0)
    if theta < 1e-6:
        # theta / sin(theta) = 1 + theta^2 / 6 + ...
        return skew * (1.0 + theta * theta / 6.0)
    if math.pi - theta < 1e-6:
        # axis from the symmetric part: R + I = 2 n n^T near theta = pi
        S = (R + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(S)))
        n = S[:, i] / math.sqrt(max(S[i, i], 1e-300))
        # keep the sign consistent with the (tiny) skew part when available
        w = np.array([skew[2, 1], skew[0, 2], skew[1, 0]])
        if w @ n < 0:
            n = -n
        N = np.array([[0, -n[2], n[1]], [n[2], 0, -n[0]], [-n[1], n[0], 0]])
        return theta * N
    return skew * (theta / math.sin(theta))


def rre(R_pred, R_gt) -> float:
    """Frobenius norm of logm(R_pred^T R_gt); sqrt(2) times the relative angle."""
    Rp = _check_rotation(R_pred, "R_pred")
    Rg = _check_rotation(R_gt, "R_gt")
    return float(np.linalg.norm(log_rotation(Rp.T @ Rg)))


def relative_angle(R_pred, R_gt) -> float:
    return rre(R_pred, R_gt) / math.sqrt(2.0)
