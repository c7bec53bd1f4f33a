import numpy as np
import pytest

from evmc.egomotion import DisparityField, Pose, disparity_to_depth, pose_disparity_to_flow
from evmc.events import CameraIntrinsics, StereoRig
from evmc.losses import census_stereo_loss, time_loss
from evmc.optimize import MotionModel, OptimizeConfig, fit
from evmc.synth import (
    OutOfFrameError,
    gen_constant_flow,
    gen_rigid,
    gen_stereo_pair,
    make_constant_flow_scene,
    make_rigid_scene,
    render_scene,
)
from evmc.warp import FlowField, count_image, propagate_events


def test_zero_flow_sources_are_static():
    scene = make_constant_flow_scene(5, 10, (0, 0), H=32, W=32, seed=2)
    ev = render_scene(scene)
    pts = {(x, y) for x, y in zip(ev.x.tolist(), ev.y.tolist())}
    assert pts == {(float(x), float(y)) for x, y in scene.sources}


def test_trajectory_arithmetic():
    scene = make_constant_flow_scene(0, 1, (2, -1), sources=[(10, 10)])
    x, y = scene.trajectory(np.array([[8.0]]))
    assert (x[0, 0], y[0, 0]) == (26.0, 2.0)


def test_exit_is_reported():
    with pytest.raises(OutOfFrameError, match=r"\(60, 10\)"):
        make_constant_flow_scene(0, 1, (2, 0), sources=[(10, 10), (60, 10)])


def test_seed_determinism():
    a, _ = gen_constant_flow(10, 10, (1, 1), seed=3, noise_rate=50)
    b, _ = gen_constant_flow(10, 10, (1, 1), seed=3, noise_rate=50)
    for name in "xytp":
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c, _ = gen_constant_flow(10, 10, (1, 1), seed=4, noise_rate=50)
    assert not np.array_equal(a.x, c.x)


def test_noise_events_are_added():
    clean, _ = gen_constant_flow(10, 10, (1, 1), seed=3)
    noisy, _ = gen_constant_flow(10, 10, (1, 1), seed=3, noise_rate=25, duration=2.0)
    assert len(noisy) == len(clean) + 50
    assert np.all(np.diff(noisy.t) >= 0)


def test_true_flow_is_a_fixed_point():
    scene = make_constant_flow_scene(10, 20, (1.25, -0.5), seed=5)
    w = propagate_events(render_scene(scene), FlowField.constant(1.25, -0.5, 64, 64), 0.0, 9)
    pts = np.column_stack([w.x, w.y])
    d = np.min(np.linalg.norm(pts[:, None, :] - scene.sources[None, :, :], axis=2), axis=1)
    assert d.max() < 1e-9


def test_monte_carlo_minimality(rng):
    ev, gt = gen_constant_flow(30, 30, (1.5, 0.5), seed=6)
    L0 = time_loss(ev, gt)
    wins = sum(L0 < time_loss(ev, FlowField.constant(*rng.uniform(-5, 5, 2), 64, 64)) for _ in range(100))
    assert wins >= 99


K = CameraIntrinsics.centered(200.0, 64, 64)


def test_translation_displacement():
    scene = make_rigid_scene(Pose(T=(0.5, 0, 0)), 10.0, K, sources=[(20, 30)])
    x, y = scene.trajectory(np.array([[8.0]]))
    assert x[0, 0] - 20 == pytest.approx(10.0, abs=1e-12) and y[0, 0] == pytest.approx(30, abs=1e-12)
    f = MotionModel("rigid_planar", [0, 0, 0, 0.5, 0, 0, 0.1]).expand(K)
    assert np.allclose(f.u, 1.25, atol=1e-12)


def test_yaw_trajectories_match_flow():
    pose = Pose(0, np.radians(2), 0)
    scene = make_rigid_scene(pose, 5.0, K, n_sources=20, seed=1)
    x, y = scene.trajectory(np.full((20, 1), 8.0))
    d = K.fx * 1.0 / 5.0
    f = pose_disparity_to_flow(pose, DisparityField.uniform(d, 64, 64), K, 1.0, 9)
    sx, sy = scene.sources[:, 0], scene.sources[:, 1]
    assert np.max(np.abs(x[:, 0] - sx - 8 * f.u[sy, sx])) < 0.1
    assert np.max(np.abs(y[:, 0] - sy - 8 * f.v[sy, sx])) < 0.1


def test_identity_pose_is_static_and_fits_to_zero():
    Ks = CameraIntrinsics.centered(200.0, 40, 40)
    ev, _ = gen_rigid(Pose(), 5.0, Ks, n_sources=20, events_per_source=15, seed=2)
    scene = make_rigid_scene(Pose(), 5.0, Ks, n_sources=20, events_per_source=15, seed=2)
    pts = np.column_stack([ev.x, ev.y])
    d = np.min(np.linalg.norm(pts[:, None, :] - scene.sources[None, :, :], axis=2), axis=1)
    assert d.max() < 1e-12
    m, _ = fit(MotionModel.zeros("rotation_only"), ev, OptimizeConfig(max_iters=50), Ks)
    assert np.max(np.abs(m.params)) < np.radians(0.05)


def stereo(d, seed=0):
    rig = StereoRig(K, K, 0.1)
    scene = make_constant_flow_scene(30, 20, (0.5, 0.25), seed=seed, disparity_px=d)
    return scene, rig, gen_stereo_pair(scene, rig, d, seed)


def test_zero_disparity_same_geometry():
    _, _, (L, R, disp) = stereo(0.0)
    assert np.array_equal(L.x, R.x) and np.array_equal(L.y, R.y)
    assert not disp.d.any()


def test_right_view_is_shifted():
    _, _, (L, R, _) = stereo(4.0)
    assert np.allclose(R.x, L.x - 4.0, atol=1e-12)


def test_census_sweep_finds_disparity():
    scene, rig, (L, R, _) = stereo(4.0, seed=1)
    f = FlowField.constant(*scene.flow, 64, 64)
    cl = count_image(propagate_events(L, f, 0.0, 9), 64, 64)
    cr = count_image(propagate_events(R, f, 0.0, 9), 64, 64)
    vals = [census_stereo_loss(cl, cr, DisparityField.uniform(d, 64, 64), DisparityField.uniform(d, 64, 64)) for d in range(9)]
    assert int(np.argmin(vals)) == 4


def test_implied_depth():
    assert disparity_to_depth(4.0, 200.0, 0.1)[0] == pytest.approx(5.0)


def test_sources_must_be_visible_in_right_view():
    scene = make_constant_flow_scene(0, 5, (0, 0), sources=[(2, 10)])
    with pytest.raises(OutOfFrameError):
        gen_stereo_pair(scene, StereoRig(K, K, 0.1), 4.0)
