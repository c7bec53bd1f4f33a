import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evmc.egomotion import euler_to_rotation
from evmc.events import EventSlice
from evmc.metrics import aee, depth_error, event_mask, flow_to_displacement, log_rotation, rpe, rre
from evmc.warp import FlowField


def test_displacement_formula():
    assert flow_to_displacement(FlowField.constant(1, 0, 2, 2), 9, 0.25, (0.0, 0.5)).u[0, 0] == 4.0
    assert flow_to_displacement(FlowField.constant(1.5, 0, 2, 2), 2, 0.5, (1.0, 1.5)).u[0, 0] == 1.5
    assert not flow_to_displacement(FlowField.zeros(2, 2), 9, 0.1, (0, 1)).u.any()


def test_displacement_errors():
    with pytest.raises(ValueError):
        flow_to_displacement(FlowField.zeros(2, 2), 9, 0.1, (1, 1))
    with pytest.raises(ValueError):
        flow_to_displacement(FlowField.zeros(2, 2), 9, 0.0, (0, 1))


def test_aee_cases():
    gt = FlowField.zeros(1, 2)
    assert aee(gt, gt) == (0.0, 0.0)
    m = np.array([[True, False]])
    assert aee(FlowField.constant(3, 4, 1, 2), gt, m) == (5.0, 1.0)
    two = FlowField(np.array([[1.0, 3.0]]), np.array([[0.0, 4.0]]))
    assert aee(two, gt) == (3.0, 0.5)


def test_aee_empty_mask():
    with pytest.raises(ValueError):
        aee(FlowField.zeros(2, 2), FlowField.zeros(2, 2), np.zeros((2, 2), bool))


def test_aee_pixel_permutation(rng):
    a = rng.normal(size=(2, 5, 5))
    b = rng.normal(size=(2, 5, 5))
    perm = rng.permutation(25)
    flat = lambda f: FlowField(f[0].ravel()[perm].reshape(5, 5), f[1].ravel()[perm].reshape(5, 5))  # noqa: E731
    assert aee(flat(a), flat(b)) == pytest.approx(aee(FlowField(*a), FlowField(*b)))


def test_event_mask():
    s = EventSlice.from_arrays([0.2, 2.6, 9.0], [0.0, 1.4, 0.0], [0, 1, 2], [1, 1, 1])
    m = event_mask(s, 2, 4)
    assert m.sum() == 2 and m[0, 0] and m[1, 3]


def test_depth_error_cases():
    gt = np.array([[15.0, 5.0]])
    assert depth_error(gt, gt) == {10.0: 0.0, 20.0: 0.0, 30.0: 0.0}
    pred = np.array([[17.0, 0.0]])
    assert depth_error(pred, gt, np.array([[True, False]])) == {10.0: None, 20.0: 2.0, 30.0: 2.0}


def test_rpe_cases():
    assert rpe([1, 2, 3], [1, 2, 3]) == 0.0
    assert rpe([1, 0, 0], [0, 1, 0]) == pytest.approx(math.pi / 2, abs=1e-15)
    t = np.array([0.3, -0.2, 0.1])
    assert rpe(5 * t, t) == pytest.approx(0.0, abs=1e-7)
    with pytest.raises(ValueError):
        rpe([0, 0, 0], [1, 0, 0])


def axis_rotation(axis, theta):
    n = np.asarray(axis, float) / np.linalg.norm(axis)
    N = np.array([[0, -n[2], n[1]], [n[2], 0, -n[0]], [-n[1], n[0], 0]])
    return np.eye(3) + math.sin(theta) * N + (1 - math.cos(theta)) * N @ N


@pytest.mark.parametrize("theta", [0.0, 1e-8, 1e-3, 0.3, 1.0, 2.5, math.pi - 1e-7, math.pi - 1e-3])
def test_rre_is_sqrt2_theta(theta):
    R = axis_rotation([1, 2, -0.5], theta)
    assert rre(np.eye(3), R) == pytest.approx(math.sqrt(2) * theta, abs=1e-9)


def test_rre_identity_and_symmetry(rng):
    Ra = euler_to_rotation(*rng.uniform(-1, 1, 3))
    Rb = euler_to_rotation(*rng.uniform(-1, 1, 3))
    assert rre(Ra, Ra) == pytest.approx(0.0, abs=1e-7)
    assert rre(Ra, Rb) == pytest.approx(rre(Rb, Ra), abs=1e-12)


def test_log_matches_scipy(rng):
    from scipy.linalg import logm

    for _ in range(10):
        R = euler_to_rotation(*rng.uniform(-2, 2, 3))
        assert np.allclose(log_rotation(R), np.real(logm(R)), atol=1e-9)


def test_rre_rejects_non_rotation():
    with pytest.raises(ValueError):
        rre(np.eye(3) * 1.1, np.eye(3))
    with pytest.raises(ValueError):
        rre(np.diag([1.0, 1.0, -1.0]), np.eye(3))


angles = st.tuples(*[st.floats(-3, 3)] * 3)


@settings(max_examples=50, deadline=None)
@given(angles, angles, angles)
def test_rre_right_invariance(a, b, q):
    Ra, Rb, Q = (euler_to_rotation(*x) for x in (a, b, q))
    assert rre(Q @ Ra, Q @ Rb) == pytest.approx(rre(Ra, Rb), abs=1e-7)


vec = st.tuples(*[st.floats(-10, 10)] * 3).filter(lambda v: np.linalg.norm(v) > 1e-3)


@settings(max_examples=50, deadline=None)
@given(vec, vec, st.floats(0.01, 100))
def test_rpe_scale_invariance(a, b, k):
    assert rpe(np.array(a) * k, b) == pytest.approx(rpe(a, b), abs=1e-7)
