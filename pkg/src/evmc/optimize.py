"""Direct fitting of parametric motion models to event data.

The models expand to dense flow fields; losses are differentiated w.r.t. the
field and chained through the model Jacobian.  ``fit`` is momentum-free
RMS-normalized gradient descent with a backtracking (Armijo) line search, so
its loss trace never increases.

On sparse scenes the timestamp loss is piecewise smooth with jumps wherever
an event enters an empty pixel, and its smooth part slopes away from the
true motion, so descent on it stalls or drifts.  Fits therefore descend the
count-image variance by default; the timestamp loss remains available as an
objective and is what the CLI reports.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import losses
from .egomotion import D_MIN, DisparityField, Pose, rigid_flow
from .events import CameraIntrinsics, EventSlice, StereoRig
from .warp import FlowField, count_image, propagate_events

MODEL_KINDS = {"constant_flow": 2, "affine_flow": 6, "rotation_only": 3, "rigid_planar": 7}

DEFAULT_SCALES = {
    "constant_flow": (1.0, 1.0),
    "affine_flow": (0.01, 0.01, 0.01, 0.01, 1.0, 1.0),
    "rotation_only": (0.01, 0.01, 0.01),
    "rigid_planar": (0.01, 0.01, 0.01, 0.1, 0.1, 0.1, 0.02),
}


OBJECTIVES = ("flow", "temporal", "variance", "sfm")


class FitError(RuntimeError):
    pass


class NonFiniteObjectiveError(FitError):
    pass


@dataclass
class MotionModel:
    """Parametric flow model.

    Parameter layouts:

    * constant_flow: (u, v)
    * affine_flow: (a11, a12, a21, a22, tu, tv), flow = A (x - cx, y - cy) + t
    * rotation_only: (psi, beta, phi)
    * rigid_planar: (psi, beta, phi, tx, ty, tz, inverse depth [1/m])
    """

    kind: str
    params: np.ndarray

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if self.params.size != MODEL_KINDS[self.kind]:
            raise ValueError(f"{self.kind} takes {MODEL_KINDS[self.kind]} parameters, got {self.params.size}")

    @classmethod
    def zeros(cls, kind: str) -> "MotionModel":
        return cls(kind, np.zeros(MODEL_KINDS[kind]))

    def with_params(self, params) -> "MotionModel":
        return MotionModel(self.kind, np.array(params, dtype=np.float64))

    def pose(self) -> Pose:
        if self.kind == "rotation_only":
            return Pose(*self.params[:3])
        if self.kind == "rigid_planar":
            return Pose.from_vector(self.params[:6])
        raise ValueError(f"{self.kind} has no pose")

    def expand(self, camera, B: int = 9) -> FlowField:
        return expand_model(self, camera, B)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "params": self.params.tolist()}
        if self.kind in ("rotation_only", "rigid_planar"):
            d["pose"] = self.pose().to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MotionModel":
        return cls(d["kind"], d["params"])


@dataclass
class OptimizeConfig:
    max_iters: int = 500
    tol: float = 1e-7
    patience: int = 5
    step: float = 0.5  # initial step, in units of param_scale
    max_step: float = 4.0
    min_step: float = 1e-6
    armijo: float = 1e-4
    rms_decay: float = 0.9
    objective: str | None = None  # flow | temporal | variance | sfm; None picks per model
    motion_loss: str = "variance"  # data term of the sfm objective: variance | time
    weights: tuple[float, float, float, float] = losses.DEFAULT_WEIGHTS
    eps: float = losses.DEFAULT_EPS
    census_window: int = losses.DEFAULT_CENSUS_WINDOW
    B: int = 9
    seed: int = 0
    param_scale: tuple[float, ...] | None = None
    coarse_grid: dict[int, tuple[float, ...]] | str | None = "auto"  # "auto": default_grid(kind)
    n_starts: int = 3
    blur: tuple[float, ...] = (1.0, 0.0)  # variance-term blur per stage, px
    frozen: tuple[int, ...] = ()

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if not self.blur or any(not b >= 0 for b in self.blur):
            raise ValueError("blur needs at least one non-negative value")
        if self.B < 2:
            raise ValueError("B must be >= 2")
        if self.objective not in (None, *OBJECTIVES):
            raise ValueError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.motion_loss not in ("variance", "time"):
            raise ValueError("motion_loss must be 'variance' or 'time'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        d["blur"] = list(self.blur)
        if isinstance(self.coarse_grid, dict):
            d["coarse_grid"] = {str(k): list(v) for k, v in self.coarse_grid.items()}
        return d


def _rig_of(camera) -> StereoRig:
    if isinstance(camera, StereoRig):
        return camera
    if isinstance(camera, CameraIntrinsics):
        return StereoRig.monocular(camera)
    raise TypeError("camera must be CameraIntrinsics or StereoRig")


def _inverse_depth_to_disparity(rho, K: CameraIntrinsics, b: float):
    """Uniform disparity for inverse depth ``rho`` and d(disparity)/d(rho)."""
    d = K.fx * b * rho
    if d < 0 or d > K.width:
        return float(np.clip(d, 0, K.width)), 0.0
    return float(d), K.fx * b


def _flow_jacobian(model: MotionModel, K: CameraIntrinsics, b: float, B: int, jacobian: bool = True):
    """Flow field of ``model`` on camera ``K`` and its Jacobian (2, P, H, W)."""
    H, W = K.height, K.width
    p = model.params
    if model.kind == "constant_flow":
        u = np.full((H, W), p[0])
        v = np.full((H, W), p[1])
        if not jacobian:
            return u, v, None
        J = np.zeros((2, 2, H, W))
        J[0, 0] = 1.0
        J[1, 1] = 1.0
        return u, v, J
    if model.kind == "affine_flow":
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        dx, dy = xx - K.cx, yy - K.cy
        u = p[0] * dx + p[1] * dy + p[4]
        v = p[2] * dx + p[3] * dy + p[5]
        if not jacobian:
            return u, v, None
        J = np.zeros((2, 6, H, W))
        J[0, 0], J[0, 1], J[0, 4] = dx, dy, 1.0
        J[1, 2], J[1, 3], J[1, 5] = dx, dy, 1.0
        return u, v, J
    if model.kind == "rotation_only":
        depth = np.ones((H, W))
        if not jacobian:
            u, v, _ = rigid_flow(p[:3], (0, 0, 0), depth, K, B)
            return u, v, None
        u, v, _, Jp, _ = rigid_flow(p[:3], (0, 0, 0), depth, K, B, jacobian=True)
        return u, v, Jp[:, :3]
    # rigid_planar: fronto-parallel plane, depth from a single inverse-depth value
    # the disparity guard d >= D_MIN becomes rho >= D_MIN / (fx b); no upper clip here
    rho_min = D_MIN / (K.fx * b)
    if p[6] <= rho_min:
        Z, dZ = 1.0 / rho_min, 0.0
    else:
        Z, dZ = 1.0 / p[6], -1.0 / p[6] ** 2
    depth = np.full((H, W), Z)
    if not jacobian:
        u, v, _ = rigid_flow(p[:3], p[3:6], depth, K, B)
        return u, v, None
    u, v, _, Jp, Jd = rigid_flow(p[:3], p[3:6], depth, K, B, jacobian=True)
    J = np.concatenate([Jp, (Jd * dZ)[:, None]], axis=1)
    return u, v, J


def expand_model(model: MotionModel, camera, B: int = 9) -> FlowField:
    """Dense flow (pixels/bin) of ``model`` on the (left) camera."""
    rig = _rig_of(camera)
    u, v, _ = _flow_jacobian(model, rig.left, rig.baseline_m, B, jacobian=False)
    return FlowField(u, v)


def model_disparity(model: MotionModel, camera) -> DisparityField:
    """Uniform disparity implied by a rigid_planar model's inverse depth."""
    if model.kind != "rigid_planar":
        raise ValueError("only rigid_planar carries depth")
    rig = _rig_of(camera)
    d, _ = _inverse_depth_to_disparity(model.params[6], rig.left, rig.baseline_m)
    return DisparityField.uniform(d, rig.left.height, rig.left.width)


def _as_slices(slices):
    if isinstance(slices, EventSlice):
        return (slices,)
    return tuple(slices)


def default_objective(kind: str, n_slices: int) -> str:
    if kind == "rigid_planar" and n_slices > 1:
        return "sfm"
    return "variance"


class Objective:
    """Loss of a motion model's parameters on fixed event data."""

    def __init__(self, kind: str, slices, camera, config: OptimizeConfig):
        self.kind = kind
        self.slices = _as_slices(slices)
        self.rig = _rig_of(camera)
        self.config = config
        self.objective = config.objective or default_objective(kind, len(self.slices))
        if self.objective == "sfm":
            if len(self.slices) != 2:
                raise ValueError("the sfm objective needs left and right slices")
            if kind != "rigid_planar":
                raise ValueError("the sfm objective needs a rigid_planar model")
        self.window = losses.common_window(*self.slices)
        self.sigma = 0.0  # count-image blur of the variance term
        self.n_events = sum(len(s) for s in self.slices)

    def _field_terms(self, u, v, slice, grad: bool):
        c = self.config
        flow = FlowField(u, v)
        terms = {}
        dU = np.zeros_like(u)
        dV = np.zeros_like(v)
        if self.objective == "variance":
            val, gu, gv = losses.variance_objective_grad(slice, flow, c.B, self.window, self.sigma)
            terms["variance"] = val
        else:
            val, gu, gv = losses.time_loss_grad(slice, flow, c.B, self.window)
            terms["time"] = val
        dU += gu
        dV += gv
        if self.objective == "flow":
            val, gu, gv = losses.smoothness_grad(flow, c.eps)
            terms["smooth"] = val
            dU += c.weights[0] * gu
            dV += c.weights[0] * gv
        return terms, dU, dV

    def evaluate(self, params, grad: bool = True):
        """``(LossReport, gradient or None)``."""
        c = self.config
        model = MotionModel(self.kind, params)
        b = self.rig.baseline_m
        weights = {"time": 1.0, "variance": 1.0}
        if self.objective == "flow":
            weights["smooth"] = c.weights[0]
        if self.objective != "sfm":
            u, v, J = _flow_jacobian(model, self.rig.left, b, c.B, jacobian=grad)
            terms, dU, dV = self._field_terms(u, v, self.slices[0], grad)
            report = losses.LossReport.combine(terms, weights)
            g = _contract(J, dU, dV) if grad else None
            return report, g

        left, right = self.slices
        _, lam2, lam3, lam4 = c.weights
        weights.update(stereo=lam2, consistency=lam3, smooth=lam4)
        uL, vL, JL = _flow_jacobian(model, self.rig.left, b, c.B, jacobian=grad)
        uR, vR, JR = _flow_jacobian(model, self.rig.right, b, c.B, jacobian=grad)
        fL, fR = FlowField(uL, vL), FlowField(uR, vR)
        H, W = uL.shape
        if c.motion_loss == "time":
            tL, dUL, dVL = losses.time_loss_grad(left, fL, c.B, self.window)
            tR, dUR, dVR = losses.time_loss_grad(right, fR, c.B, self.window)
        else:
            tL, dUL, dVL = losses.variance_objective_grad(left, fL, c.B, self.window, self.sigma)
            tR, dUR, dVR = losses.variance_objective_grad(right, fR, c.B, self.window, self.sigma)
        if lam2 == 0 and lam3 == 0 and lam4 == 0:
            report = losses.LossReport.combine({c.motion_loss: tL + tR}, weights)
            if not grad:
                return report, None
            return report, _contract(JL, dUL, dVL) + _contract(JR, dUR, dVR)
        cl = count_image(propagate_events(left, fL, 0.0, c.B, self.window), H, W)
        cr = count_image(propagate_events(right, fR, 0.0, c.B, self.window), H, W)
        dl, ddl = _inverse_depth_to_disparity(params[6], self.rig.left, b)
        dr, ddr = _inverse_depth_to_disparity(params[6], self.rig.right, b)
        DL = np.full((H, W), dl)
        DR = np.full((H, W), dr)
        st, sgL, sgR = losses.census_stereo_grad(cl, cr, DL, DR, c.census_window, c.eps)
        co, cgL, cgR = losses.lr_consistency_grad(DL, DR, c.eps)
        smL, mgL = losses.image_smoothness_grad(DL, c.eps)
        smR, mgR = losses.image_smoothness_grad(DR, c.eps)
        terms = {c.motion_loss: tL + tR, "stereo": st, "consistency": co, "smooth": smL + smR}
        report = losses.LossReport.combine(terms, weights)
        if not grad:
            return report, None
        g = _contract(JL, dUL, dVL) + _contract(JR, dUR, dVR)
        gDL = lam2 * sgL + lam3 * cgL + lam4 * mgL
        gDR = lam2 * sgR + lam3 * cgR + lam4 * mgR
        g[6] += ddl * np.sum(gDL) + ddr * np.sum(gDR)
        return report, g

    def value(self, params) -> float:
        return self.evaluate(params, grad=False)[0].total

    def warped_positions(self, params) -> np.ndarray:
        """All warped event coordinates (both reference times, every slice)."""
        c = self.config
        model = MotionModel(self.kind, params)
        cams = (self.rig.left, self.rig.right)
        out = []
        for slice, K in zip(self.slices, cams):
            u, v, _ = _flow_jacobian(model, K, self.rig.baseline_m, c.B, jacobian=False)
            for tp in losses._reference_times(c.B):
                w = propagate_events(slice, FlowField(u, v), tp, c.B, self.window)
                out.extend([w.x, w.y])
        return np.concatenate(out) if out else np.zeros(0)

    def _stereo_active(self) -> bool:
        return self.objective == "sfm" and any(w != 0 for w in self.config.weights[1:])

    def stereo_signature(self, params) -> np.ndarray:
        """Census signs of both count images and the floor of each disparity.

        The stereo terms jump wherever one of these changes.
        """
        c = self.config
        model = MotionModel(self.kind, params)
        b = self.rig.baseline_m
        out = []
        for slice, K in zip(self.slices, (self.rig.left, self.rig.right)):
            u, v, _ = _flow_jacobian(model, K, b, c.B, jacobian=False)
            img = count_image(propagate_events(slice, FlowField(u, v), 0.0, c.B, self.window), K.height, K.width)
            out.append(losses.census_transform(img, c.census_window).desc.ravel().astype(np.float64))
            out.append(np.atleast_1d(np.floor(_inverse_depth_to_disparity(params[6], K, b)[0])))
        return np.concatenate(out)

    def crosses_grid(self, params, h: float) -> bool:
        """True if a central-difference probe of size ``h`` straddles a discontinuity.

        That is: an event moves across a pixel line, or with stereo terms a
        census sign flips or a disparity crosses an integer.  Finite
        differences are meaningless at such points.
        """
        params = np.asarray(params, dtype=np.float64)
        stereo = self._stereo_active()
        for i in range(params.size):
            e = np.zeros_like(params)
            e[i] = h
            a = np.floor(self.warped_positions(params + e))
            b = np.floor(self.warped_positions(params - e))
            if np.any(a != b):
                return True
            if stereo and np.any(self.stereo_signature(params + e) != self.stereo_signature(params - e)):
                return True
        return False

    def value_and_grad(self, params):
        report, g = self.evaluate(params, grad=True)
        return report.total, g

    __call__ = value


def _contract(J, dU, dV):
    return np.einsum("phw,hw->p", J[0], dU) + np.einsum("phw,hw->p", J[1], dV)


def numeric_gradient(objective, params, h: float = 1e-6) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    if not h > 0:
        raise ValueError("h must be > 0")
    params = np.asarray(params, dtype=np.float64)
    g = np.zeros_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        fp = float(objective(params + e))
        fm = float(objective(params - e))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteObjectiveError(f"objective is not finite when probing coordinate {i}")
        g[i] = (fp - fm) / (2 * h)
    return g


def analytic_gradient(model: MotionModel, slices, config: OptimizeConfig, camera) -> np.ndarray:
    return Objective(model.kind, slices, camera, config).value_and_grad(model.params)[1]


def check_gradient(model: MotionModel, slices, config: OptimizeConfig, camera, h: float = 1e-7):
    """``(relative error, crosses_grid)`` of the analytic gradient at ``model``."""
    obj = Objective(model.kind, slices, camera, config)
    ga = obj.value_and_grad(model.params)[1]
    gn = numeric_gradient(obj.value, model.params, h)
    return relative_gradient_error(ga, gn), obj.crosses_grid(model.params, h)


def relative_gradient_error(analytic, numeric) -> float:
    """max_i |a_i - n_i| / max(||n||_inf, 1e-12)."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(numeric)), 1e-12))


def _scales(kind: str, config: OptimizeConfig) -> np.ndarray:
    s = np.array(config.param_scale if config.param_scale is not None else DEFAULT_SCALES[kind], dtype=np.float64)
    if s.size != MODEL_KINDS[kind] or np.any(s <= 0):
        raise ValueError(f"param_scale must hold {MODEL_KINDS[kind]} positive values")
    return s


def _descend(evaluate, params, config: OptimizeConfig, scale, free, grid=None):
    """Line-searched descent on ``evaluate(params, grad) -> (f, g)``.

    With a ``grid`` (parameter index -> values), the lowest lattice points
    seed ``config.n_starts`` descents and the best result is kept.  Returns
    ``(params, trace)``; the trace holds the value at the chosen seed and
    the loss after every accepted move.
    """
    params = np.array(params, dtype=np.float64)
    f = evaluate(params, False)[0]
    if f is None or not math.isfinite(f):
        raise NonFiniteObjectiveError("objective is not finite at the initial parameters")
    if not grid:
        return _descend_from(evaluate, params, config, scale, free)
    best = None
    for p0 in _lattice_starts(evaluate, params, f, grid, config.n_starts):
        p1, trace = _descend_from(evaluate, p0, config, scale, free)
        if best is None or trace[-1] < best[1][-1]:
            best = (p1, trace)
    return best


def _lattice_starts(evaluate, params, f0, grid, n):
    """The ``n`` lowest lattice points (the initial point competes too)."""
    cands = [(f0, 0, params)]
    keys = sorted(grid)
    for i, values in enumerate(itertools.product(*(grid[k] for k in keys)), start=1):
        trial = params.copy()
        trial[keys] = values
        f = evaluate(trial, False)[0]
        if f is not None and math.isfinite(f):
            cands.append((f, i, trial))
    cands.sort(key=lambda c: (c[0], c[1]))
    return [c[2] for c in cands[:max(n, 1)]]


def _descend_from(evaluate, params, config: OptimizeConfig, scale, free):
    f, g = evaluate(params, True)
    trace = [f]
    ms = np.zeros_like(params)
    alpha = config.step
    quiet = 0
    for it in range(config.max_iters):
        ms = g * g if it == 0 else config.rms_decay * ms + (1 - config.rms_decay) * g * g
        rms = np.sqrt(ms)
        direction = np.where(free & (rms > 0), -scale * g / np.where(rms > 0, rms, 1.0), 0.0)
        slope = float(g @ direction)
        if not slope < 0:
            break
        a = alpha
        accepted = False
        while a >= config.min_step:
            trial = params + a * direction
            ft = evaluate(trial, False)[0]
            if ft is None:  # outside the parameter domain
                a *= 0.5
                continue
            if not math.isfinite(ft):
                raise NonFiniteObjectiveError(
                    f"non-finite loss at iteration {it}, step {a:g}, params {trial.tolist()}"
                )
            if ft <= f + config.armijo * a * slope:
                accepted = True
                break
            a *= 0.5
        if not accepted:
            break
        rel = (f - ft) / max(abs(f), 1e-300)
        params = trial
        f, g = evaluate(params, True)
        trace.append(f)
        alpha = min(2.0 * a, config.max_step)
        quiet = quiet + 1 if rel < config.tol else 0
        if quiet >= config.patience:
            break
    return params, trace


def _span(half: float, step: float) -> tuple[float, ...]:
    n = int(round(half / step))
    return tuple(float(k * step) for k in range(-n, n + 1))


def default_grid(kind: str) -> dict[int, tuple[float, ...]] | None:
    """Seeding lattice per model kind (flow in px/bin, angles in rad)."""
    if kind == "constant_flow":
        return {0: _span(5.0, 0.5), 1: _span(5.0, 0.5)}
    if kind == "affine_flow":
        return {4: _span(5.0, 0.5), 5: _span(5.0, 0.5)}
    if kind == "rotation_only":
        a = _span(math.radians(4.0), math.radians(1.0))
        return {0: a, 1: a, 2: a}
    return None


def _grid_of(kind: str, config: OptimizeConfig):
    if isinstance(config.coarse_grid, str):
        if config.coarse_grid != "auto":
            raise ValueError(f"coarse_grid must be a dict, None or 'auto', got {config.coarse_grid!r}")
        return default_grid(kind)
    return config.coarse_grid


def _free_mask(n: int, frozen) -> np.ndarray:
    free = np.ones(n, dtype=bool)
    free[list(frozen)] = False
    return free


def _objective_fn(objective: Objective):
    def evaluate(p, grad):
        report, g = objective.evaluate(p, grad)
        return report.total, g
    return evaluate


def disparity_grid(camera, d_max: float | None = None, step_px: float = 0.5) -> tuple[float, ...]:
    """Inverse depths whose disparities span ``step_px .. d_max`` pixels."""
    rig = _rig_of(camera)
    if d_max is None:
        d_max = min(rig.left.width / 4.0, 32.0)
    d = np.arange(step_px, d_max + 0.5 * step_px, step_px)
    return tuple(float(x) for x in d / (rig.left.fx * rig.baseline_m))


def _blurred_descent(objective: Objective, params, config: OptimizeConfig, scale, free, grid):
    """One descent per blur level, seeding only the first; the last level's objective is final."""
    evaluate = _objective_fn(objective)
    uses_blur = objective.objective == "variance" or (
        objective.objective == "sfm" and config.motion_loss == "variance")
    levels = config.blur if uses_blur else (0.0,)
    traces = []
    for i, sigma in enumerate(levels):
        objective.sigma = float(sigma)
        params, trace = _descend(evaluate, params, config, scale, free, grid if i == 0 else None)
        traces.append(trace)
    objective.sigma = 0.0
    return params, traces


def fit_staged(model_init: MotionModel, slices, config: OptimizeConfig | None = None, camera=None):
    """Like :func:`fit` but returns every stage's trace.

    Single objectives run one stage.  The stereo objective runs two: the
    pose under the motion terms alone with the inverse depth held, then the
    inverse depth along the scale-locked family (T * rho fixed), on which
    the flow is unchanged and only the stereo terms vary.
    """
    config = config or OptimizeConfig()
    if camera is None:
        raise ValueError("a camera (CameraIntrinsics or StereoRig) is required")
    kind = model_init.kind
    objective = Objective(kind, slices, camera, config)
    params = model_init.params.copy()
    if objective.n_events == 0:
        f = objective.value(params)
        if not math.isfinite(f):
            raise NonFiniteObjectiveError("objective is not finite at the initial parameters")
        return model_init.with_params(params), [[f]]
    scale = _scales(kind, config)
    if objective.objective != "sfm":
        params, traces = _blurred_descent(objective, params, config, scale,
                                          _free_mask(params.size, config.frozen), _grid_of(kind, config))
        return model_init.with_params(params), traces

    lam1 = config.weights[0]
    motion = Objective(kind, slices, camera, replace(config, weights=(lam1, 0.0, 0.0, 0.0)))
    grid = _grid_of(kind, config) or {}
    pose_grid = {k: v for k, v in grid.items() if k != 6}
    params, traces = _blurred_descent(motion, params, config, scale,
                                      _free_mask(params.size, set(config.frozen) | {6}), pose_grid)
    if 6 in config.frozen:
        return model_init.with_params(params), traces

    rho0 = params[6]
    if not rho0 > 0:
        raise FitError("rigid_planar needs a positive initial inverse depth")
    tau = params[3:6] * rho0

    def locked(x, grad):
        rho = x[0]
        if not rho > 0:
            return None, None
        p = params.copy()
        p[3:6] = tau / rho
        p[6] = rho
        report, g = objective.evaluate(p, grad)
        if g is None:
            return report.total, None
        return report.total, np.array([g[6] - float(g[3:6] @ tau) / rho**2])

    rho_grid = grid.get(6) or disparity_grid(camera)
    x, t2 = _descend(locked, [rho0], config, scale[6:7], np.ones(1, dtype=bool), {0: rho_grid})
    params[6] = x[0]
    params[3:6] = tau / x[0]
    return model_init.with_params(params), traces + [t2]


def fit(model_init: MotionModel, slices, config: OptimizeConfig | None = None, camera=None):
    """Minimize the configured loss from ``model_init``.

    Returns ``(fitted model, trace)`` where ``trace`` holds the loss at the
    start and after every accepted step of the final stage.
    """
    model, traces = fit_staged(model_init, slices, config, camera)
    return model, traces[-1]


def fit_result_json(model: MotionModel, trace, config: OptimizeConfig, extra: dict | None = None) -> str:
    d = {"model": model.to_dict(), "trace": [float(x) for x in trace], "config": config.to_dict()}
    if extra:
        d.update(extra)
    return json.dumps(d, sort_keys=True, indent=2)


def fit_disparity_field(left_count, right_count, init_left: DisparityField, init_right: DisparityField,
                        config: OptimizeConfig | None = None, step_px: float = 0.25):
    """Dense per-pixel disparity fit under the stereo, consistency and smoothness terms.

    Only the stereo loss pins metric scale, so dense disparities are fitted
    against fixed (already deblurred) count images.
    """
    config = config or OptimizeConfig()
    _, lam2, lam3, lam4 = config.weights
    H, W = init_left.shape

    def evaluate(x, grad):
        dl = np.clip(x[: H * W].reshape(H, W), 0, W)
        dr = np.clip(x[H * W:].reshape(H, W), 0, W)
        st, sl, sr = losses.census_stereo_grad(left_count, right_count, dl, dr, config.census_window, config.eps)
        co, cl, cr = losses.lr_consistency_grad(dl, dr, config.eps)
        ml, gl = losses.image_smoothness_grad(dl, config.eps)
        mr, gr = losses.image_smoothness_grad(dr, config.eps)
        f = lam2 * st + lam3 * co + lam4 * (ml + mr)
        if not grad:
            return f, None
        return f, np.concatenate([(lam2 * sl + lam3 * cl + lam4 * gl).ravel(), (lam2 * sr + lam3 * cr + lam4 * gr).ravel()])

    x = np.concatenate([init_left.d.ravel(), init_right.d.ravel()])
    f, g = evaluate(x, True)
    trace = [f]
    alpha = 1.0
    for _ in range(config.max_iters):
        direction = -step_px * np.sign(g)
        slope = float(g @ direction)
        if not slope < 0:
            break
        a = alpha
        while a >= config.min_step:
            ft, _ = evaluate(x + a * direction, False)
            if ft <= f + config.armijo * a * slope:
                break
            a *= 0.5
        else:
            break
        rel = (f - ft) / max(abs(f), 1e-300)
        x = np.clip(x + a * direction, 0, W)
        f, g = evaluate(x, True)
        trace.append(f)
        alpha = min(2 * a, 4.0)
        if rel < config.tol:
            break
    return DisparityField(x[: H * W].reshape(H, W)), DisparityField(x[H * W:].reshape(H, W)), trace
