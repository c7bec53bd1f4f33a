"""Rigid camera motion: Euler rotations, disparity/depth and induced flow.

Conventions: R = Rz(phi) @ Ry(beta) @ Rx(psi); a point P in the first camera
frame maps to R @ P + T in the second.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .events import CameraIntrinsics
from .warp import FlowField

D_MIN = 0.1  # px
Z_MIN = 0.05  # m


@dataclass(frozen=True)
class Pose:
    psi: float = 0.0
    beta: float = 0.0
    phi: float = 0.0
    T: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "T", tuple(float(t) for t in self.T))
        if len(self.T) != 3:
            raise ValueError("T must have 3 components")
        if not np.all(np.isfinite([self.psi, self.beta, self.phi, *self.T])):
            raise ValueError("pose contains non-finite values")

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.psi, self.beta, self.phi])

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_rotation(self.psi, self.beta, self.phi)

    def as_vector(self) -> np.ndarray:
        return np.array([self.psi, self.beta, self.phi, *self.T])

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = [float(a) for a in v]
        return cls(v[0], v[1], v[2], tuple(v[3:6]))

    def to_dict(self) -> dict:
        tx, ty, tz = self.T
        return {"psi": self.psi, "beta": self.beta, "phi": self.phi, "tx": tx, "ty": ty, "tz": tz}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(d["psi"], d["beta"], d["phi"], (d["tx"], d["ty"], d["tz"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True, eq=False)
class DisparityField:
    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("disparity must be a 2-D array")
        if not np.all(np.isfinite(d)) or np.any(d < 0) or np.any(d > d.shape[1]):
            raise ValueError("disparity must be finite and within [0, width]")
        object.__setattr__(self, "d", d)

    @classmethod
    def uniform(cls, value: float, H: int, W: int) -> "DisparityField":
        return cls(np.full((H, W), float(value)))

    @property
    def shape(self):
        return self.d.shape

    def save(self, path) -> None:
        """Flat binary: int32 H, W then float64 disparities, row-major."""
        with open(path, "wb") as f:
            f.write(_DISP_HEADER.pack(*self.d.shape))
            f.write(np.ascontiguousarray(self.d, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "DisparityField":
        raw = open(path, "rb").read()
        H, W = _DISP_HEADER.unpack_from(raw)
        d = np.frombuffer(raw, dtype="<f8", offset=_DISP_HEADER.size)
        if d.size != H * W:
            raise ValueError(f"{path}: expected {H * W} values, found {d.size}")
        return cls(d.reshape(H, W).copy())


_DISP_HEADER = struct.Struct("<2i")


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0, 0, 0], [0, -s, -c], [0, c, -s]])


def _dry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0, c], [0, 0, 0], [-c, 0, -s]])


def _drz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0], [c, -s, 0], [0, 0, 0]])


def euler_to_rotation(psi: float, beta: float, phi: float) -> np.ndarray:
    return _rz(phi) @ _ry(beta) @ _rx(psi)


def euler_rotations(psi, beta, phi) -> np.ndarray:
    """Vectorized :func:`euler_to_rotation`; returns shape (..., 3, 3)."""
    psi, beta, phi = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (psi, beta, phi)))
    cx, sx = np.cos(psi), np.sin(psi)
    cy, sy = np.cos(beta), np.sin(beta)
    cz, sz = np.cos(phi), np.sin(phi)
    R = np.empty(psi.shape + (3, 3))
    R[..., 0, 0] = cz * cy
    R[..., 0, 1] = cz * sy * sx - sz * cx
    R[..., 0, 2] = cz * sy * cx + sz * sx
    R[..., 1, 0] = sz * cy
    R[..., 1, 1] = sz * sy * sx + cz * cx
    R[..., 1, 2] = sz * sy * cx - cz * sx
    R[..., 2, 0] = -sy
    R[..., 2, 1] = cy * sx
    R[..., 2, 2] = cy * cx
    return R


def rotation_jacobian(psi: float, beta: float, phi: float) -> np.ndarray:
    """d R / d(psi, beta, phi), shape (3, 3, 3) with the angle index first."""
    Rx, Ry, Rz = _rx(psi), _ry(beta), _rz(phi)
    return np.stack([Rz @ Ry @ _drx(psi), Rz @ _dry(beta) @ Rx, _drz(phi) @ Ry @ Rx])


def rotation_to_euler(R) -> tuple[float, float, float]:
    """Inverse of :func:`euler_to_rotation` away from beta = +-pi/2."""
    R = np.asarray(R, dtype=np.float64)
    psi = np.arctan2(R[2, 1], R[2, 2])
    beta = np.arctan2(-R[2, 0], np.hypot(R[0, 0], R[1, 0]))
    phi = np.arctan2(R[1, 0], R[0, 0])
    return float(psi), float(beta), float(phi)


def disparity_to_depth(d, f: float, b: float, d_min: float = D_MIN):
    """Depth ``f * b / d`` and a mask of entries clamped to ``d_min``."""
    d = np.asarray(d, dtype=np.float64)
    clamped = d <= d_min
    Z = f * b / np.where(clamped, d_min, d)
    if Z.ndim == 0:
        return float(Z), bool(clamped)
    return Z, clamped


def rigid_flow(angles, T, depth, K: CameraIntrinsics, B: int, jacobian: bool = False):
    """Per-pixel flow (pixels/bin) of a rigid motion over a depth map.

    Returns ``(u, v, valid)``; with ``jacobian`` also ``(J_pose, J_depth)``
    where J_pose has shape (2, 6, H, W) for (psi, beta, phi, tx, ty, tz) and
    J_depth (2, H, W) is the derivative w.r.t. each pixel's own depth.
    Pixels whose transformed depth is below ``Z_MIN`` get zero flow and zero
    derivatives.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    H, W = depth.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    q = np.stack([(xx - K.cx) / K.fx, (yy - K.cy) / K.fy, np.ones_like(xx)])
    R = euler_to_rotation(*angles)
    T = np.asarray(T, dtype=np.float64)
    Rq = np.einsum("ij,jhw->ihw", R, q)
    X = Rq * depth + T[:, None, None]
    valid = X[2] > Z_MIN
    Z2 = np.where(valid, X[2], 1.0)
    xs = K.fx * X[0] / Z2 + K.cx
    ys = K.fy * X[1] / Z2 + K.cy
    scale = 1.0 / (B - 1)
    u = np.where(valid, (xs - xx) * scale, 0.0)
    v = np.where(valid, (ys - yy) * scale, 0.0)
    if not jacobian:
        return u, v, valid

    # d(xs, ys) / dX, each (3, H, W)
    gx = np.stack([K.fx / Z2, np.zeros_like(Z2), -K.fx * X[0] / Z2**2]) * scale
    gy = np.stack([np.zeros_like(Z2), K.fy / Z2, -K.fy * X[1] / Z2**2]) * scale
    dR = rotation_jacobian(*angles)
    dX_ang = np.einsum("kij,jhw->kihw", dR, q) * depth  # (3 angles, 3, H, W)
    J = np.zeros((2, 6, H, W))
    J[0, :3] = np.einsum("kihw,ihw->khw", dX_ang, gx)
    J[1, :3] = np.einsum("kihw,ihw->khw", dX_ang, gy)
    J[0, 3:] = gx
    J[1, 3:] = gy
    Jd = np.stack([np.sum(Rq * gx, axis=0), np.sum(Rq * gy, axis=0)])
    J[:, :, ~valid] = 0.0
    Jd[:, ~valid] = 0.0
    return u, v, valid, J, Jd


def pose_disparity_to_flow(pose: Pose, disp: DisparityField, K: CameraIntrinsics, b: float, B: int) -> FlowField:
    depth, _ = disparity_to_depth(disp.d, K.fx, b)
    u, v, valid = rigid_flow(pose.angles, pose.T, depth, K, B)
    return FlowField(u, v, valid)
