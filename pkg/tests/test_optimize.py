import json
import math

import numpy as np
import pytest

from evmc.egomotion import Pose
from evmc.events import CameraIntrinsics, EventSlice
from evmc.optimize import (
    MODEL_KINDS,
    FitError,
    MotionModel,
    NonFiniteObjectiveError,
    Objective,
    OptimizeConfig,
    _descend,
    analytic_gradient,
    default_grid,
    disparity_grid,
    expand_model,
    fit,
    fit_result_json,
    fit_staged,
    numeric_gradient,
    relative_gradient_error,
)
from evmc.synth import gen_constant_flow, gen_rigid


def test_expand_constant(camera):
    f = expand_model(MotionModel("constant_flow", [2, -1]), camera)
    assert f.shape == (48, 48) and np.all(f.u == 2) and np.all(f.v == -1)


def test_expand_affine_degenerate(camera):
    f = expand_model(MotionModel("affine_flow", [0, 0, 0, 0, 1, 1]), camera)
    assert np.all(f.u == 1) and np.all(f.v == 1)


def test_expand_affine(camera):
    f = expand_model(MotionModel("affine_flow", [1, 0, 0, 2, 0, 0]), camera)
    assert f.u[0, 0] == pytest.approx(-camera.cx) and f.v[47, 0] == pytest.approx(2 * (47 - camera.cy))


def test_expand_rigid_identity(camera):
    f = expand_model(MotionModel("rigid_planar", [0, 0, 0, 0, 0, 0, 0.4]), camera)
    assert np.max(np.abs(f.u)) < 1e-12 and np.max(np.abs(f.v)) < 1e-12


def test_model_validation():
    with pytest.raises(ValueError):
        MotionModel("constant_flow", [1, 2, 3])
    with pytest.raises(ValueError):
        MotionModel("spline", [1])
    m = MotionModel("rigid_planar", np.arange(7.0))
    assert MotionModel.from_dict(json.loads(json.dumps(m.to_dict()))).params.tolist() == m.params.tolist()
    assert m.pose() == Pose(0, 1, 2, (3, 4, 5))


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizeConfig(max_iters=0)
    with pytest.raises(ValueError):
        OptimizeConfig(tol=0)
    with pytest.raises(ValueError):
        OptimizeConfig(objective="hamming")
    d = OptimizeConfig().to_dict()
    assert d["max_iters"] == 500 and d["tol"] == 1e-7 and d["seed"] == 0
    assert d["weights"] == [1.0, 1.0, 0.1, 0.2]


def test_numeric_gradient_quadratic():
    assert numeric_gradient(lambda p: p[0] ** 2, np.array([3.0]), 1e-4)[0] == pytest.approx(6.0, abs=1e-6)


def test_numeric_gradient_constant():
    assert not numeric_gradient(lambda p: 4.0, np.ones(3)).any()


def test_numeric_gradient_names_bad_coordinate():
    with pytest.raises(NonFiniteObjectiveError, match="coordinate 1"):
        numeric_gradient(lambda p: math.inf if p[1] > 0 else 0.0, np.zeros(2))
    with pytest.raises(ValueError):
        numeric_gradient(lambda p: 0.0, np.zeros(1), 0.0)


def test_zero_events_zero_gradient(camera):
    for kind, n in MODEL_KINDS.items():
        for obj in ("temporal", "variance"):
            g = analytic_gradient(MotionModel(kind, np.full(n, 0.1)), EventSlice.empty(),
                                  OptimizeConfig(objective=obj), camera)
            assert not g.any()


def test_two_event_hand_derivative():
    # A (s=0) and B (s=1) both start at (5, 5); only B moves under flow (u, 0) to t'=0,
    # only A moves to t'=8.  For 0 < 8u < 1:
    # L(u) = ((1 - 8u)^2 + 1) / (2 - 8u)^2 + 1
    ev = EventSlice.from_arrays([5.0, 5.0], [5.0, 5.0], [0.0, 1.0], [1, 1])
    K = CameraIntrinsics.centered(100.0, 12, 12)
    u = 0.03
    a, n = 2 - 8 * u, (1 - 8 * u) ** 2 + 1
    want = (-16 * (1 - 8 * u) * a - 2 * n * -8) / a**3
    obj = Objective("constant_flow", ev, K, OptimizeConfig(objective="temporal"))
    f, g = obj.value_and_grad(np.array([u, 0.0]))
    assert f == pytest.approx(n / a**2 + 1, abs=1e-12)
    assert g[0] == pytest.approx(want, abs=1e-12)


def test_gradients_match_finite_differences(flow_scene, camera):
    ev, _ = flow_scene
    rng = np.random.default_rng(3)
    draws = {
        "constant_flow": lambda: rng.uniform(-2, 2, 2),
        "affine_flow": lambda: np.r_[rng.uniform(-0.02, 0.02, 4), rng.uniform(-2, 2, 2)],
        "rotation_only": lambda: rng.uniform(-0.03, 0.03, 3),
        "rigid_planar": lambda: np.r_[rng.uniform(-0.03, 0.03, 3), rng.uniform(-0.1, 0.1, 3), rng.uniform(0.1, 0.5)],
    }
    for kind, draw in draws.items():
        for name in ("flow", "variance"):
            obj = Objective(kind, ev, camera, OptimizeConfig(objective=name))
            checked = 0
            while checked < 20:
                p = draw()
                if obj.crosses_grid(p, 1e-8):
                    continue
                err = relative_gradient_error(obj.value_and_grad(p)[1], numeric_gradient(obj.value, p, 1e-8))
                assert err < 1e-4, (kind, name, p)
                checked += 1


def test_fit_recovers_constant_flow():
    ev, _ = gen_constant_flow(30, 30, (2.0, -1.0), seed=0)
    K = CameraIntrinsics.centered(200.0, 64, 64)
    m, trace = fit(MotionModel.zeros("constant_flow"), ev, OptimizeConfig(), K)
    assert np.max(np.abs(m.params - [2.0, -1.0])) < 0.05
    assert all(b <= a for a, b in zip(trace, trace[1:]))


def test_fit_recovers_rotation():
    K = CameraIntrinsics.centered(200.0, 96, 96)
    angles = np.radians([1.5, -2.0, 1.0])
    ev, _ = gen_rigid(Pose(*angles), 5.0, K, n_sources=40, events_per_source=30, seed=1)
    m, _ = fit(MotionModel.zeros("rotation_only"), ev, OptimizeConfig(), K)
    assert np.max(np.abs(m.params - angles)) < np.radians(0.5)


def test_fit_zero_events_returns_init(camera):
    init = MotionModel("constant_flow", [0.5, 0.25])
    m, trace = fit(init, EventSlice.empty(), OptimizeConfig(), camera)
    assert m.params.tolist() == [0.5, 0.25] and trace == [0.0]
    m, trace = fit(init, EventSlice.empty(), OptimizeConfig(objective="flow"), camera)
    assert len(trace) == 1 and trace[0] == pytest.approx(2 * 2 * 48 * 47 * 1e-3)


def test_all_stage_traces_are_monotone(flow_scene, camera):
    ev, _ = flow_scene
    for obj in ("variance", "temporal", "flow"):
        _, traces = fit_staged(MotionModel.zeros("affine_flow"), ev, OptimizeConfig(objective=obj, max_iters=40), camera)
        for t in traces:
            assert all(b <= a for a, b in zip(t, t[1:]))


def test_fit_is_deterministic(flow_scene, camera):
    ev, _ = flow_scene
    a = fit(MotionModel.zeros("constant_flow"), ev, OptimizeConfig(max_iters=30), camera)
    b = fit(MotionModel.zeros("constant_flow"), ev, OptimizeConfig(max_iters=30), camera)
    assert a[0].params.tobytes() == b[0].params.tobytes() and a[1] == b[1]


def test_descent_aborts_on_non_finite_loss():
    def evaluate(p, grad):
        f = math.nan if p[0] < 0.5 else (p[0] - 0.0) ** 2
        return f, (np.array([2 * p[0]]) if grad else None)

    with pytest.raises(NonFiniteObjectiveError, match="non-finite loss"):
        _descend(evaluate, [1.0], OptimizeConfig(), np.ones(1), np.ones(1, bool))


def test_frozen_parameters_stay_put(flow_scene, camera):
    ev, _ = flow_scene
    m, _ = fit(MotionModel("constant_flow", [0.0, 0.3]), ev,
               OptimizeConfig(frozen=(1,), coarse_grid=None, max_iters=20), camera)
    assert m.params[1] == 0.3


def test_grids(rig):
    assert default_grid("rigid_planar") is None
    g = default_grid("constant_flow")
    assert g[0][0] == -5.0 and g[0][-1] == 5.0 and 0.0 in g[0]
    d = np.array(disparity_grid(rig)) * rig.left.fx * rig.baseline_m
    assert d[0] == pytest.approx(0.5) and d[-1] == pytest.approx(12.0)


def test_sfm_needs_positive_inverse_depth(rig):
    ev, _ = gen_constant_flow(5, 5, (0.5, 0), H=48, W=48, seed=0)
    with pytest.raises(FitError):
        fit(MotionModel("rigid_planar", [0, 0, 0, 0, 0, 0, -0.1]), (ev, ev), OptimizeConfig(max_iters=2), rig)


def test_sfm_needs_two_slices(camera, flow_scene):
    with pytest.raises(ValueError):
        Objective("rigid_planar", flow_scene[0], camera, OptimizeConfig(objective="sfm"))


def test_fit_result_json(camera):
    s = fit_result_json(MotionModel("constant_flow", [1, 2]), [3.0, 2.0], OptimizeConfig())
    d = json.loads(s)
    assert d["model"]["params"] == [1.0, 2.0] and d["trace"] == [3.0, 2.0]
