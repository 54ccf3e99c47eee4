import numpy as np
import pytest

from mpmcouple.rigid import (DYNAMIC, HINGE, KINEMATIC, RigidBody, adjoint_integrate_rigid, integrate_rigid,
                             rigid_sdf_world)
from mpmcouple.sdf import Box, Circle, rotation, sdf_query

G = (0.0, -9.8)


def test_force_free_body_moves_linearly():
    body = RigidBody(Circle(0.1), mass=2.0)
    s = body.initial_state((0.2, 0.3), 0.1, (0.5, -0.25, 1.5))
    s0 = s.copy()
    for n in range(1, 51):
        s = integrate_rigid(body, s, np.zeros(3), np.zeros(3), 1e-3)
        np.testing.assert_array_equal(s[3:], s0[3:])
    np.testing.assert_allclose(s[:3], s0[:3] + 50 * 1e-3 * s0[3:], rtol=1e-13)


def test_free_fall_matches_discrete_sum():
    body = RigidBody(Circle(0.1), mass=1.0)
    s = body.initial_state((0.0, 1.0))
    dt, N = 1e-3, 200
    for _ in range(N):
        s = integrate_rigid(body, s, np.zeros(3), np.zeros(3), dt, G)
    assert s[4] == pytest.approx(-9.8 * N * dt, rel=1e-12)
    assert s[1] == pytest.approx(1.0 - 9.8 * dt * dt * N * (N + 1) / 2, rel=1e-12)


def pendulum():
    body = RigidBody(Box((0.12, 0.01)), mass=0.5, mode=HINGE, anchor=(-0.1, 0.0))
    return body, body.initial_state((0.5, 0.5), -np.pi / 2 + 0.05)


def test_hinge_small_angle_period():
    body, s = pendulum()
    L = float(np.linalg.norm(body.anchor))
    T_ref = 2 * np.pi * np.sqrt(body.pivot_inertia / (body.mass * 9.8 * L))
    dt = 1e-4
    phase = [s[2] + np.pi / 2]
    n = int(10.5 * T_ref / dt)
    for _ in range(n):
        s = integrate_rigid(body, s, np.zeros(3), np.zeros(3), dt, G)
        phase.append(s[2] + np.pi / 2)
    phase = np.array(phase)
    up = np.nonzero((phase[:-1] < 0) & (phase[1:] >= 0))[0]
    # linear interpolation of upward zero crossings
    t_cross = (up + phase[up] / (phase[up] - phase[up + 1])) * dt
    T = np.diff(t_cross).mean()
    assert len(up) >= 10
    assert abs(T - T_ref) / T_ref < 0.02


def test_hinge_anchor_does_not_drift():
    body, s = pendulum()
    s[5] = 3.0
    for _ in range(10_000):
        s = integrate_rigid(body, s, np.array([0.3, -0.1, 0.01]), np.array([0, 0, 0.02]), 1e-4, G)
        anchor = s[:2] + rotation(s[2]) @ body.anchor
        assert np.abs(anchor - body.pivot).max() < 1e-9


def test_kinematic_follows_action_and_ignores_forces():
    body = RigidBody(Box((0.1, 0.1)), mode=KINEMATIC)
    s = body.initial_state((0.5, 0.5))
    s = integrate_rigid(body, s, np.array([100.0, 100.0, 5.0]), np.array([0.2, 0.0, 1.0]), 0.01, G)
    np.testing.assert_allclose(s, [0.502, 0.5, 0.01, 0.2, 0.0, 1.0])


def test_auto_inertia_uniform_disk():
    assert RigidBody(Circle(0.2), mass=3.0).inertia == pytest.approx(0.5 * 3.0 * 0.04)


# -------------------------------------------------------------------- SDF

def test_world_sdf_identity_pose():
    body = RigidBody(Box((0.1, 0.05)))
    p = np.random.default_rng(0).uniform(-0.3, 0.3, (20, 2))
    d, n = rigid_sdf_world(body, np.zeros(6), p)
    d0, n0 = sdf_query(body.shape, p, (0, 0, 0))
    np.testing.assert_array_equal(d, d0)
    np.testing.assert_array_equal(n, n0)


def test_world_sdf_translation():
    body = RigidBody(Box((0.1, 0.05)))
    p = np.random.default_rng(1).uniform(-0.3, 0.3, (20, 2))
    t = np.array([0.2, -0.1])
    d, _ = rigid_sdf_world(body, np.r_[t, 0, 0, 0, 0], p)
    d0, _ = body.shape.evaluate(p - t)
    np.testing.assert_allclose(d, d0, atol=1e-15)


def test_world_sdf_rotation_of_offset_circle():
    # a circle of radius r centred at c in the body frame, as a box-free oracle
    r, c, theta = 0.05, np.array([0.2, 0.0]), 0.7
    body = RigidBody(Circle(r))
    p = np.random.default_rng(2).uniform(-0.5, 0.5, (30, 2))
    centre = rotation(theta) @ c
    pose = np.r_[centre, theta, 0, 0, 0]
    d, n = rigid_sdf_world(body, pose, p)
    np.testing.assert_allclose(d, np.linalg.norm(p - centre, axis=1) - r, atol=1e-14)
    np.testing.assert_allclose(n, (p - centre) / np.linalg.norm(p - centre, axis=1)[:, None], atol=1e-13)


# ---------------------------------------------------------------- adjoint

def test_pose_wrench_derivative_is_dt2_over_m():
    body = RigidBody(Circle(0.1), mass=2.5, inertia=0.3)
    dt = 1e-2
    s = body.initial_state((0.1, 0.2))
    for i in range(3):
        g_out = np.zeros(6)
        g_out[i] = 1.0
        _, g_w, g_a = adjoint_integrate_rigid(body, s, np.zeros(3), np.zeros(3), dt, g_out)
        want = dt * dt / (body.mass if i < 2 else body.inertia)
        assert g_w[i] == pytest.approx(want, rel=1e-14)
        np.testing.assert_array_equal(g_a, g_w)


def test_kinematic_force_gradient_zero():
    body = RigidBody(Box((0.1, 0.1)), mode=KINEMATIC)
    _, g_w, _ = adjoint_integrate_rigid(body, np.zeros(6), np.ones(3), np.ones(3), 0.01, np.ones(6))
    np.testing.assert_array_equal(g_w, 0.0)


def rollout_pose(body, s, wrenches, actions, dt, w):
    for f, a in zip(wrenches, actions):
        s = integrate_rigid(body, s, f, a, dt, G)
    return float(w @ s)


@pytest.mark.parametrize("mode", [DYNAMIC, HINGE])
def test_twenty_step_adjoint_matches_fd(mode):
    rng = np.random.default_rng(3)
    if mode == HINGE:
        body = RigidBody(Box((0.12, 0.02)), mass=0.4, mode=HINGE, anchor=(-0.08, 0.01), damping=0.3)
        s0 = body.initial_state((0.5, 0.5), 0.4, (0, 0, 1.2))
    else:
        body = RigidBody(Box((0.12, 0.02)), mass=0.4, damping=0.3)
        s0 = body.initial_state((0.5, 0.5), 0.4, (0.3, -0.2, 1.2))
    dt, N = 1e-2, 20
    wr = rng.normal(size=(N, 3))
    ac = rng.normal(size=(N, 3))
    w = rng.normal(size=6)

    states = [s0]
    for f, a in zip(wr, ac):
        states.append(integrate_rigid(body, states[-1], f, a, dt, G))
    g = w.copy()
    g_ac = np.zeros_like(ac)
    for n in reversed(range(N)):
        g, _, g_ac[n] = adjoint_integrate_rigid(body, states[n], wr[n], ac[n], dt, g, G)
    if mode == HINGE:
        from mpmcouple.rigid import hinge_reduce
        g = hinge_reduce(body, s0, g)

    h = 1e-6
    for i in (3, 4, 5) if mode == DYNAMIC else (5,):
        sp, sm = s0.copy(), s0.copy()
        if mode == HINGE:
            from mpmcouple.rigid import hinge_state
            sp = hinge_state(body, s0[2], s0[5] + h)
            sm = hinge_state(body, s0[2], s0[5] - h)
        else:
            sp[i] += h
            sm[i] -= h
        fd = (rollout_pose(body, sp, wr, ac, dt, w) - rollout_pose(body, sm, wr, ac, dt, w)) / (2 * h)
        assert abs(g[i] - fd) / abs(fd) < 1e-6
    for n, k in [(0, 2), (7, 0 if mode == DYNAMIC else 2), (19, 2)]:
        ap, am = ac.copy(), ac.copy()
        ap[n, k] += h
        am[n, k] -= h
        fd = (rollout_pose(body, s0, wr, ap, dt, w) - rollout_pose(body, s0, wr, am, dt, w)) / (2 * h)
        assert abs(g_ac[n, k] - fd) / abs(fd) < 1e-6
