"""Synthetic event streams with known motion.

Each source pixel emits events along its exact motion trajectory at
uniformly drawn times.  The first source always has an event at the start
and one at the end of the window, so rescaling timestamps to bins recovers
the generating bin times exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .egomotion import DisparityField, Pose, euler_rotations
from .events import CameraIntrinsics, EventSlice, StereoRig
from .warp import FlowField

FRAME_MARGIN = 1.0  # px kept clear of the border


class OutOfFrameError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SynthScene:
    """Everything needed to regenerate a synthetic slice."""

    seed: int
    sources: np.ndarray  # (n, 2) integer pixel (x, y)
    polarities: np.ndarray  # (n,)
    B: int
    H: int
    W: int
    events_per_source: int
    duration: float = 1.0
    noise_rate: float = 0.0  # spurious events per second
    flow: tuple[float, float] | None = None
    pose: Pose | None = None
    depth_m: float | None = None
    K: CameraIntrinsics | None = None

    def trajectory(self, tstar) -> tuple[np.ndarray, np.ndarray]:
        """Positions of every source at bin times ``tstar`` (n, m) arrays."""
        tstar = np.asarray(tstar, dtype=np.float64)
        x0 = self.sources[:, 0:1].astype(np.float64)
        y0 = self.sources[:, 1:2].astype(np.float64)
        if self.flow is not None:
            return x0 + tstar * self.flow[0], y0 + tstar * self.flow[1]
        return _rigid_trajectory(self.pose, self.depth_m, self.K, self.B, x0, y0, tstar)

    def ground_truth(self) -> dict:
        d = {"B": self.B, "H": self.H, "W": self.W, "seed": self.seed, "duration": self.duration,
             "noise_rate": self.noise_rate, "events_per_source": self.events_per_source,
             "n_sources": int(len(self.sources))}
        if self.flow is not None:
            d.update(kind="constant_flow", flow=[float(self.flow[0]), float(self.flow[1])])
        else:
            d.update(kind="rigid", pose=self.pose.to_dict(), depth_m=self.depth_m,
                     K={"fx": self.K.fx, "fy": self.K.fy, "cx": self.K.cx, "cy": self.K.cy,
                        "width": self.K.width, "height": self.K.height})
        return d


def _rigid_trajectory(pose: Pose, depth_m, K: CameraIntrinsics, B, x0, y0, tstar):
    """Exact reprojection of a fronto-parallel point under the pose scaled by t*/(B-1)."""
    alpha = tstar / (B - 1)
    shape = np.broadcast(x0, alpha).shape
    alpha = np.broadcast_to(alpha, shape)
    P = np.stack([
        np.broadcast_to((x0 - K.cx) / K.fx * depth_m, shape),
        np.broadcast_to((y0 - K.cy) / K.fy * depth_m, shape),
        np.full(shape, float(depth_m)),
    ])
    R = euler_rotations(*(alpha[None] * pose.angles.reshape(3, *([1] * alpha.ndim))))
    X = np.einsum("...ij,j...->i...", R, P) + alpha[None] * np.asarray(pose.T).reshape(3, *([1] * alpha.ndim))
    xs = K.fx * X[0] / X[2] + K.cx
    ys = K.fy * X[1] / X[2] + K.cy
    return xs, ys


def _pick_sources(rng, n, H, W, ok):
    """``n`` distinct source pixels for which ``ok(xs, ys)`` holds."""
    yy, xx = np.mgrid[0:H, 0:W]
    cand = np.column_stack([xx.ravel(), yy.ravel()])
    cand = cand[ok(cand[:, 0], cand[:, 1])]
    if len(cand) < n:
        raise OutOfFrameError(f"only {len(cand)} source positions keep the motion in frame, {n} requested")
    return cand[np.sort(rng.choice(len(cand), size=n, replace=False))]


def _in_frame(x, y, H, W, margin=FRAME_MARGIN):
    return (x >= margin) & (x <= W - 1 - margin) & (y >= margin) & (y <= H - 1 - margin)


def _check_sources(scene: SynthScene):
    tt = np.linspace(0, scene.B - 1, 33)[None, :]
    x, y = scene.trajectory(tt)
    bad = ~np.all(_in_frame(x, y, scene.H, scene.W), axis=1)
    if bad.any():
        offenders = [tuple(int(c) for c in s) for s in scene.sources[bad]]
        raise OutOfFrameError(f"sources leave the frame: {offenders}")


def render_scene(scene: SynthScene, noise_seed: int | None = None, shift_x: float = 0.0) -> EventSlice:
    """Generate the event slice of ``scene``.

    ``shift_x`` translates the signal events (used for the right view of a
    stereo pair); noise is drawn from ``noise_seed`` (defaults to the scene
    seed) so that two views get independent noise.
    """
    rng = np.random.default_rng(scene.seed)
    n, m, B = len(scene.sources), scene.events_per_source, scene.B
    tstar = rng.uniform(0.0, B - 1, size=(n, m))
    if n and m >= 2:
        tstar[0, 0], tstar[0, 1] = 0.0, float(B - 1)
    x, y = scene.trajectory(tstar)
    x = x + shift_x
    p = np.broadcast_to(scene.polarities[:, None], (n, m))
    t = tstar / (B - 1) * scene.duration
    xs, ys, ts, ps = [x.ravel()], [y.ravel()], [t.ravel()], [p.ravel()]

    n_noise = int(round(scene.noise_rate * scene.duration))
    if n_noise:
        nrng = np.random.default_rng([scene.seed, 1 if noise_seed is None else noise_seed + 2])
        xs.append(nrng.uniform(0, scene.W - 1, n_noise))
        ys.append(nrng.uniform(0, scene.H - 1, n_noise))
        ts.append(nrng.uniform(0, scene.duration, n_noise))
        ps.append(nrng.choice(np.array([-1, 1]), n_noise))
    x, y, t, p = (np.concatenate(a) for a in (xs, ys, ts, ps))
    order = np.argsort(t, kind="stable")
    return EventSlice.from_arrays(x[order], y[order], t[order], p[order])


def _polarities(rng, n):
    return rng.choice(np.array([-1, 1], dtype=np.int8), size=n)


def make_constant_flow_scene(n_sources, events_per_source, flow, B=9, H=64, W=64, seed=0,
                             noise_rate=0.0, duration=1.0, sources=None, disparity_px=0.0) -> SynthScene:
    """``disparity_px`` keeps picked sources visible in a right view shifted by that much."""
    rng = np.random.default_rng([seed, 0])
    u, v = float(flow[0]), float(flow[1])
    span = B - 1
    d = float(disparity_px)

    def ok(x, y):
        return (_in_frame(x, y, H, W) & _in_frame(x + span * u, y + span * v, H, W)
                & _in_frame(x - d, y, H, W) & _in_frame(x - d + span * u, y + span * v, H, W))

    if sources is None:
        sources = _pick_sources(rng, n_sources, H, W, ok)
    sources = np.asarray(sources, dtype=np.int64).reshape(-1, 2)
    scene = SynthScene(seed, sources, _polarities(rng, len(sources)), B, H, W, events_per_source,
                       duration, noise_rate, flow=(u, v))
    _check_sources(scene)
    return scene


def gen_constant_flow(n_sources, events_per_source, flow, B=9, H=64, W=64, seed=0, noise_rate=0.0,
                      duration=1.0, sources=None):
    """Events of sources translating at ``flow`` px/bin, plus ground-truth flow."""
    scene = make_constant_flow_scene(n_sources, events_per_source, flow, B, H, W, seed, noise_rate,
                                     duration, sources)
    return render_scene(scene), FlowField.constant(flow[0], flow[1], H, W)


def make_rigid_scene(pose: Pose, depth_m: float, K: CameraIntrinsics, B=9, n_sources=40,
                     events_per_source=30, seed=0, noise_rate=0.0, duration=1.0, sources=None,
                     disparity_px=0.0) -> SynthScene:
    if not depth_m > 0.05:
        raise ValueError("depth must exceed the 0.05 m guard")
    H, W = K.height, K.width
    rng = np.random.default_rng([seed, 0])

    def ok(x, y):
        s = SynthScene(seed, np.column_stack([x, y]), np.zeros(len(x), dtype=np.int8), B, H, W,
                       events_per_source, pose=pose, depth_m=depth_m, K=K)
        xt, yt = s.trajectory(np.linspace(0, B - 1, 9)[None, :])
        return np.all(_in_frame(xt, yt, H, W) & _in_frame(xt - disparity_px, yt, H, W), axis=1)

    if sources is None:
        sources = _pick_sources(rng, n_sources, H, W, ok)
    sources = np.asarray(sources, dtype=np.int64).reshape(-1, 2)
    scene = SynthScene(seed, sources, _polarities(rng, len(sources)), B, H, W, events_per_source,
                       duration, noise_rate, pose=pose, depth_m=depth_m, K=K)
    _check_sources(scene)
    return scene


def gen_rigid(pose: Pose, depth_m: float, K: CameraIntrinsics, B=9, H=None, W=None, n_sources=40,
              events_per_source=30, seed=0, noise_rate=0.0, duration=1.0):
    """Events of a fronto-parallel plane at ``depth_m`` seen by a moving camera."""
    if (H is not None and H != K.height) or (W is not None and W != K.width):
        raise ValueError("H, W must match the camera resolution")
    scene = make_rigid_scene(pose, depth_m, K, B, n_sources, events_per_source, seed, noise_rate, duration)
    return render_scene(scene), pose


def gen_stereo_pair(scene: SynthScene, rig: StereoRig, uniform_disparity_px: float, seed: int = 0):
    """Left/right slices of ``scene``; the right view is shifted by -disparity in x."""
    d = float(uniform_disparity_px)
    if d < 0:
        raise ValueError("disparity must be >= 0")
    tt = np.linspace(0, scene.B - 1, 33)[None, :]
    x, y = scene.trajectory(tt)
    bad = ~np.all(_in_frame(x - d, y, scene.H, scene.W), axis=1)
    if bad.any():
        offenders = [tuple(int(c) for c in s) for s in scene.sources[bad]]
        raise OutOfFrameError(f"sources not visible in the right view: {offenders}")
    left = render_scene(scene, noise_seed=2 * seed)
    right = render_scene(scene, noise_seed=2 * seed + 1, shift_x=-d)
    return left, right, DisparityField.uniform(d, scene.H, scene.W)


def write_ground_truth(scene: SynthScene, path, extra: dict | None = None) -> None:
    d = scene.ground_truth()
    if extra:
        d.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(d, f, sort_keys=True, indent=2)
