import json

import numpy as np
import pytest
from scipy.ndimage import uniform_filter

from evmc import losses
from evmc.egomotion import DisparityField, Pose
from evmc.events import EventSlice
from evmc.losses import (
    census_stereo_loss,
    census_transform,
    charbonnier,
    lr_consistency_loss,
    smoothness_loss,
    time_loss,
    time_loss_at,
    total_flow_loss,
    total_sfm_loss,
    variance_loss,
)
from evmc.synth import gen_stereo_pair, make_rigid_scene
from evmc.warp import FlowField, WarpedEvents, count_image, propagate_events


def warped(x, y, s, p):
    return WarpedEvents(np.asarray(x, float), np.asarray(y, float), np.asarray(s, float),
                        np.asarray(p, np.int8), 0.0, np.zeros(len(x)))


@pytest.mark.parametrize("x, eps, want", [(0, 0.001, 0.001), (3, 4, 5), (-3, 4, 5)])
def test_charbonnier(x, eps, want):
    assert charbonnier(x, eps) == pytest.approx(want, abs=1e-15)


def test_time_loss_at_cases():
    assert time_loss_at(warped([], [], [], []), 5, 5) == 0
    assert time_loss_at(warped([2.0], [2.0], [0.5], [1]), 5, 5) == 0.25


def test_time_loss_empty():
    assert time_loss(EventSlice.empty(), FlowField.zeros(8, 8)) == 0


def test_time_loss_is_sum_of_both_references(flow_scene):
    ev, gt = flow_scene
    a = time_loss_at(propagate_events(ev, gt, 0.0, 9), 48, 48)
    b = time_loss_at(propagate_events(ev, gt, 8.0, 9), 48, 48)
    assert a >= 0 and b >= 0
    assert time_loss(ev, gt, 9) == a + b


def test_time_loss_prefers_true_flow(flow_scene):
    ev, gt = flow_scene
    assert time_loss(ev, gt) < time_loss(ev, FlowField.zeros(48, 48))


def test_time_loss_sweep_minimum(flow_scene):
    ev, gt = flow_scene
    alphas = np.linspace(0, 2, 81)
    vals = [time_loss(ev, gt.scaled(a)) for a in alphas]
    assert abs(alphas[int(np.argmin(vals))] - 1.0) <= 0.05


def test_time_loss_permutation_and_time_scale_invariance(flow_scene, rng):
    ev, _ = flow_scene
    f = FlowField.constant(0.7, -0.2, 48, 48)
    base = time_loss(ev, f)
    perm = rng.permutation(len(ev))
    shuffled = EventSlice.from_arrays(ev.x[perm], ev.y[perm], ev.t[perm], ev.p[perm])
    assert time_loss(shuffled, f) == pytest.approx(base, abs=1e-12)
    stretched = EventSlice.from_arrays(ev.x, ev.y, ev.t * 3.5, ev.p)
    assert time_loss(stretched, f) == pytest.approx(base, abs=1e-12)


def test_variance_loss_cases(flow_scene):
    assert variance_loss(warped([], [], [], []), 4, 4) == 0
    ones = warped(np.arange(4.0), np.zeros(4), np.zeros(4), np.ones(4))
    assert variance_loss(ones, 1, 4) == 0
    ev, gt = flow_scene
    sharp = variance_loss(propagate_events(ev, gt, 0.0, 9), 48, 48)
    flat = variance_loss(propagate_events(ev, FlowField.zeros(48, 48), 0.0, 9), 48, 48)
    assert sharp < flat


def test_variance_loss_lower_bound(rng):
    w = warped(rng.uniform(0, 9, 50), rng.uniform(0, 9, 50), np.zeros(50), np.ones(50))
    c = count_image(w, 10, 10)
    assert variance_loss(w, 10, 10) >= -c.max() ** 2 / 4


def test_smoothness_floor():
    eps = 1e-3
    assert smoothness_loss(FlowField.constant(1.0, 2.0, 2, 2), eps) == pytest.approx(8 * eps, rel=1e-12)


def test_smoothness_one_pair():
    f = FlowField(np.array([[0.0, 1.0]]), np.zeros((1, 2)))
    assert smoothness_loss(f, 1e-12) == pytest.approx(1.0, abs=1e-9)


def test_smoothness_decreases_under_box_blur():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        u, v = rng.normal(size=(2, 12, 12))
        prev = smoothness_loss(FlowField(u, v))
        for _ in range(3):
            u, v = uniform_filter(u, 3, mode="nearest"), uniform_filter(v, 3, mode="nearest")
            cur = smoothness_loss(FlowField(u, v))
            assert cur < prev
            prev = cur


def test_census_constant_image():
    assert not census_transform(np.full((4, 5), 7.0), 3).desc.any()


def test_census_bump():
    d = census_transform(np.array([[0.0, 5.0, 0.0]]), 3).desc[0, 1].reshape(3, 3)
    assert d[1].tolist() == [1, 0, 1]
    assert not d[0].any() and not d[2].any()


def test_census_is_invariant_to_monotone_maps(rng):
    img = rng.normal(size=(9, 9))
    base = census_transform(img, 5).desc
    assert np.array_equal(census_transform(img + 3.0, 5).desc, base)
    assert np.array_equal(census_transform(np.exp(2 * img), 5).desc, base)


def test_census_rejects_even_window():
    with pytest.raises(ValueError):
        census_transform(np.zeros((3, 3)), 4)


def test_census_stereo_floor(rng):
    H, W, Wc, eps = 6, 7, 3, 1e-3
    img = rng.normal(size=(H, W))
    zero = DisparityField.uniform(0, H, W)
    assert census_stereo_loss(img, img, zero, zero, Wc, eps) == pytest.approx(2 * H * W * Wc * Wc * eps)
    z = np.zeros((H, W))
    assert census_stereo_loss(z, z, zero, zero, Wc, eps) == pytest.approx(2 * H * W * Wc * Wc * eps)


def test_census_stereo_prefers_true_shift(rng):
    H, W = 16, 32
    left = rng.uniform(0, 3, size=(H, W))
    right = np.zeros_like(left)
    right[:, :-4] = left[:, 4:]
    d4 = DisparityField.uniform(4, H, W)
    d0 = DisparityField.uniform(0, H, W)
    assert census_stereo_loss(left, right, d4, d4) < census_stereo_loss(left, right, d0, d0)


def test_lr_consistency_cases():
    H, W, eps = 3, 8, 1e-3
    z = DisparityField.uniform(0, H, W)
    assert lr_consistency_loss(z, z, eps) == pytest.approx(2 * H * W * eps)
    d = DisparityField.uniform(2, H, W)
    assert lr_consistency_loss(d, d, eps) == pytest.approx(2 * H * (W - 2) * eps)
    val = lr_consistency_loss(d, z, eps)
    assert val == pytest.approx(2 * H * (W - 2) + 2 * H * W, rel=1e-5)


def test_total_flow_loss_weights(flow_scene):
    ev, gt = flow_scene
    r0 = total_flow_loss(ev, gt, lam1=0.0)
    assert r0.total == time_loss(ev, gt)
    r1 = total_flow_loss(ev, gt, lam1=1.0)
    assert r1.total == pytest.approx(r1.terms["time"] + r1.terms["smooth"], abs=1e-12)
    empty = total_flow_loss(EventSlice.empty(), FlowField.constant(1, 1, 48, 48), lam1=0.5)
    assert empty.total == pytest.approx(0.5 * smoothness_loss(FlowField.zeros(48, 48)), abs=1e-12)
    parsed = json.loads(r1.to_json())
    assert set(parsed["terms"]) == {"time", "smooth"}


@pytest.fixture(scope="module")
def stereo_case():
    from evmc.events import CameraIntrinsics, StereoRig

    K = CameraIntrinsics.centered(200.0, 48, 48)
    rig = StereoRig(K, K, 0.1)
    pose = Pose(0.01, -0.01, 0.005, (0.02, 0.01, 0.0))
    scene = make_rigid_scene(pose, 5.0, K, n_sources=25, events_per_source=20, seed=2, disparity_px=4)
    left, right, disp = gen_stereo_pair(scene, rig, 4.0)
    return left, right, pose, disp, rig


def test_total_sfm_loss_weights(stereo_case):
    L, R, pose, disp, rig = stereo_case
    r0 = total_sfm_loss(L, R, pose, disp, disp, rig, lam2=0, lam3=0, lam4=0)
    assert r0.total == r0.terms["time"]
    r = total_sfm_loss(L, R, pose, disp, disp, rig)
    t = r.terms
    want = t["time"] + 1.0 * t["stereo"] + 0.1 * t["consistency"] + 0.2 * t["smooth"]
    assert r.total == pytest.approx(want, abs=1e-12)
    assert r.weights == {"time": 1.0, "stereo": 1.0, "consistency": 0.1, "smooth": 0.2}


def test_total_sfm_loss_prefers_truth(stereo_case):
    L, R, pose, disp, rig = stereo_case
    true = total_sfm_loss(L, R, pose, disp, disp, rig).total
    bent = Pose(pose.psi + 0.01, pose.beta, pose.phi, pose.T)
    assert true < total_sfm_loss(L, R, bent, disp, disp, rig).total


def test_losses_are_finite_and_nonnegative(flow_scene, rng):
    ev, _ = flow_scene
    for _ in range(10):
        f = FlowField(rng.normal(size=(48, 48)), rng.normal(size=(48, 48)))
        r = total_flow_loss(ev, f)
        assert np.isfinite(r.total) and all(v >= 0 for v in r.terms.values())


def test_report_combine_order():
    r = losses.LossReport.combine({"time": 1.5, "smooth": 2.0}, {"smooth": 0.25})
    assert r.total == 2.0
