from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpmcouple import contact, mpm
from mpmcouple.contact import (ContactParams, RigidBoundary, bc_friction, body_contact_velocity, forecast_contact,
                               forecast_contact_vjp, grid_contact, legal_position_correction, particle_contact,
                               smooth_blend)
from mpmcouple.errors import ConfigError
from mpmcouple.sdf import AnnulusContainer, Box, Capsule, Circle, SampledGrid, sdf_query, sdf_query_full, \
    sdf_query_vjp

finite = st.floats(-5, 5, allow_nan=False)
vec = st.tuples(finite, finite)

# ---------------------------------------------------------------------- SDF


def test_circle_examples():
    d, n = sdf_query(Circle(0.1), [[0.2, 0.0]], (0.0, 0.0, 0.0))
    assert d[0] == pytest.approx(0.1)
    np.testing.assert_allclose(n[0], [1.0, 0.0])
    d, n = sdf_query(Circle(0.1), [[0.0, 0.0]], (0.0, 0.0, 0.0))
    assert d[0] == pytest.approx(-0.1)
    np.testing.assert_array_equal(n[0], [1.0, 0.0])


def test_sampled_circle_matches_analytic():
    circle = Circle(0.1)
    h = 1 / 256
    g = np.arange(-0.15, 0.15 + h / 2, h)
    P = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    grid = SampledGrid(lo=(g[0], g[0]), spacing=h, values=circle.evaluate(P)[0].reshape(len(g), len(g)),
                       source=circle.to_dict())
    q = np.random.default_rng(0).uniform(-0.14, 0.14, (1000, 2))
    d_s, _ = sdf_query(grid, q, (0.0, 0.0, 0.0))
    d_a, _ = sdf_query(circle, q, (0.0, 0.0, 0.0))
    assert np.abs(d_s - d_a).max() < 2e-3


def test_sampled_query_outside_box_is_conservative():
    circle = Circle(0.1)
    grid = SampledGrid.from_shape(circle, 64)
    q = np.random.default_rng(1).uniform(-1, 1, (500, 2))
    far = np.abs(q).max(axis=1) > 0.2
    d_s, _ = sdf_query(grid, q[far], (0.0, 0.0, 0.0))
    d_a, _ = sdf_query(circle, q[far], (0.0, 0.0, 0.0))
    assert np.all(d_s > 0) and np.all(d_s >= d_a - 2 * grid.spacing)


SHAPES = [Circle(0.1), Box((0.1, 0.05)), Capsule(0.1, 0.03), AnnulusContainer(0.2, 0.02),
          AnnulusContainer(0.2, 0.02, 0.6)]


@pytest.mark.parametrize("shape", SHAPES, ids=lambda s: s.kind)
def test_analytic_gradient_unit_length(shape):
    p = np.random.default_rng(2).uniform(-0.3, 0.3, (400, 2))
    h = 1e-7
    gx = (shape.evaluate(p + [h, 0])[0] - shape.evaluate(p - [h, 0])[0]) / (2 * h)
    gy = (shape.evaluate(p + [0, h])[0] - shape.evaluate(p - [0, h])[0]) / (2 * h)
    norm = np.hypot(gx, gy)
    smooth = np.abs(norm - np.median(norm)) < 0.5       # drop samples straddling a crease
    assert smooth.mean() > 0.95
    np.testing.assert_allclose(norm[smooth], 1.0, atol=1e-5)


@pytest.mark.parametrize("shape", SHAPES[:4], ids=lambda s: s.kind)
def test_sdf_query_vjp_matches_fd(shape):
    rng = np.random.default_rng(3)
    pts = rng.uniform(-0.25, 0.25, (30, 2))
    pose = np.array([0.05, -0.02, 0.3])
    wd, wn = rng.normal(size=30), rng.normal(size=(30, 2))

    def loss(P, Q):
        d, n = sdf_query(shape, P, Q)
        return (wd * d).sum() + (wn * n).sum()

    _, _, cache = sdf_query_full(shape, pts, pose)
    g_pts, g_pose = sdf_query_vjp(shape, pts, pose, cache, wd, wn)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (loss(pts, pose + e) - loss(pts, pose - e)) / (2 * h)
        assert g_pose[i] == pytest.approx(fd, rel=1e-4, abs=1e-6)
    e = np.zeros_like(pts)
    e[7, 1] = h
    fd = (loss(pts + e, pose) - loss(pts - e, pose)) / (2 * h)
    assert g_pts[7, 1] == pytest.approx(fd, rel=1e-4, abs=1e-6)


# ----------------------------------------------------------------- friction

def test_friction_zero_relative_velocity():
    np.testing.assert_allclose(bc_friction([0.3, -0.1], [0.3, -0.1], [0, 1], 0.5), [0.3, -0.1])


def test_friction_pure_tangent_untouched():
    np.testing.assert_allclose(bc_friction([2.0, 0.0], [0, 0], [0, 1], 0.5), [2.0, 0.0])


def test_friction_worked_example():
    np.testing.assert_allclose(bc_friction([1.0, -2.0], [0, 0], [0, 1], 0.5), [0.0, 0.0])


def test_friction_partial_slide():
    np.testing.assert_allclose(bc_friction([4.0, -2.0], [0, 0], [0, 1], 0.5), [3.0, 0.0])


def test_friction_separating_unchanged():
    np.testing.assert_array_equal(bc_friction([1.0, 2.0], [0, 0], [0, 1], 0.5), [1.0, 2.0])


def test_friction_head_on_arrest():
    np.testing.assert_array_equal(bc_friction([0.0, -2.0], [0.1, 0.0], [0, 1], 0.5), [0.1, 0.0])


@settings(max_examples=200, deadline=None)
@given(vec, vec, st.floats(0, 2 * np.pi), st.floats(0, 3))
def test_friction_cone(v_in, v_c, ang, mu):
    n = np.array([np.cos(ang), np.sin(ang)])
    v_in, v_c = np.array(v_in), np.array(v_c)
    out = bc_friction(v_in, v_c, n, mu)
    rel = v_in - v_c
    vt = rel - (rel @ n) * n
    assert np.linalg.norm(out - v_c) <= np.linalg.norm(vt) + 1e-12 or rel @ n >= 0


# -------------------------------------------------------------------- blend

def test_blend_inside_full():
    np.testing.assert_array_equal(smooth_blend(np.array([1.0, 2.0]), np.array([5.0, 5.0]), -0.1, 10.0), [1, 2])


def test_blend_midpoint():
    out = smooth_blend(np.array([0.0, 2.0]), np.array([2.0, 0.0]), np.log(2) / 10.0, 10.0)
    np.testing.assert_allclose(out, [1.0, 1.0])


def test_blend_far_returns_input():
    np.testing.assert_allclose(smooth_blend(np.array([0.0, 0.0]), np.array([3.0, 4.0]), 100.0, 10.0), [3, 4])


# ------------------------------------------------------------ legal position

def half_plane(x):
    x = np.atleast_2d(x)
    return x[:, 1] - 0.5, np.tile([0.0, 1.0], (len(x), 1))


def test_legal_outside_unchanged():
    v = legal_position_correction([0.3, 0.6], [0.0, -1.0], 1e-3, half_plane)
    np.testing.assert_array_equal(v, [0.0, -1.0])


def test_legal_half_plane_correction():
    dt, e = 1e-3, 0.004
    x = np.array([0.3, 0.5])
    v_out = np.array([0.0, -e / dt])
    v = legal_position_correction(x, v_out, dt, half_plane)
    np.testing.assert_allclose(v - v_out, [0.0, e / dt], rtol=1e-12)
    assert half_plane(x + v * dt)[0][0] == pytest.approx(0.0, abs=1e-15)


def test_legal_failure_is_counted():
    faults = Counter()

    def stubborn(x):
        x = np.atleast_2d(x)
        return np.full(len(x), -1.0), np.zeros((len(x), 2))
    legal_position_correction([0.3, 0.5], [0.0, 0.0], 1e-3, stubborn, faults)
    assert faults["legal_projection"] == 1


def test_legal_correction_on_benchmark_contacts(monkeypatch):
    """Corrected trial points land on the legal side in nearly every benchmark contact."""
    from mpmcouple.coupling import rollout
    from mpmcouple.scene import build, bundled_scene

    stats = Counter()
    real = contact.particle_bc_stage

    def spy(v, x, mass, q, boundary, params, dt, faults=None):
        v_new, cache = real(v, x, mass, q, boundary, params, dt, faults)
        sel = cache["sel"]
        if len(sel):
            d, _, _ = boundary.trial(x[sel] + v_new[sel] * dt, q, sel)
            stats["contacts"] += len(sel)
            stats["legal"] += int((d >= -1e-6).sum())
        return v_new, cache

    monkeypatch.setattr(contact, "particle_bc_stage", spy)
    b = build(bundled_scene("benchmark"))
    rollout(b.system, b.state, b.actions[:60], tape=False)
    assert stats["contacts"] > 1000
    assert stats["legal"] / stats["contacts"] >= 0.99


# ----------------------------------------------------------- body velocity

def test_body_contact_velocity_examples():
    np.testing.assert_array_equal(body_contact_velocity([0, 0, 0], [0, 0], [[0.3, 0.1]]), [[0, 0]])
    np.testing.assert_allclose(body_contact_velocity([1.0, 2.0, 0.0], [0, 0], [[0.3, 0.1], [-1, 4]]),
                               [[1, 2], [1, 2]])
    np.testing.assert_allclose(body_contact_velocity([0, 0, 2.0], [0, 0], [[0.1, 0.0]]), [[0.0, 0.2]])


# -------------------------------------------------------------- contact setup

def wall_scene(res=32):
    """A box floor near y = 0.3 and a few particles just above it."""
    body_state = np.array([0.5, 0.25, 0.0, 0.0, 0.0, 0.0])
    x = np.array([[0.45, 0.31], [0.5, 0.32], [0.55, 0.305], [0.5, 0.6]])
    v = np.array([[0.1, -1.0], [0.0, -0.5], [-0.2, -0.8], [0.0, -1.0]])
    return body_state, x, v


def test_params_validation():
    with pytest.raises(ConfigError, match="contact.alpha"):
        ContactParams(alpha=1.5)
    with pytest.raises(ConfigError, match="contact.d_hat"):
        ContactParams(d_hat=0.0)


def test_grid_contact_far_nodes_unchanged():
    res = 32
    grid = mpm.Grid(res)
    X = grid.node_positions()
    v_hat = np.random.default_rng(4).normal(size=X.shape)
    m = np.ones(len(X))
    b = RigidBoundary(0, Circle(0.05), [0.9, 0.9, 0, 0, 0, 0])
    near = sdf_query(Circle(0.05), X, (0.9, 0.9, 0))[0] < 1 / res
    active = ~near
    v, led, _ = grid_contact(v_hat, X, m, active, [b], ContactParams.for_grid(res, model="grid"))
    np.testing.assert_array_equal(v, v_hat)
    np.testing.assert_array_equal(led[0], 0.0)


def test_grid_contact_head_on_node_zeroed():
    res = 32
    X = np.array([[0.5, 0.30]])
    b = RigidBoundary(0, Box((0.2, 0.05)), [0.5, 0.25, 0, 0, 0, 0])
    params = ContactParams.for_grid(res, model="grid")
    v, _, _ = grid_contact(np.array([[0.0, -1.0]]), X, np.ones(1), np.ones(1, bool), [b], params)
    np.testing.assert_allclose(v, 0.0, atol=1e-15)


def test_grid_contact_ledger_is_momentum_change():
    res = 32
    rng = np.random.default_rng(5)
    grid = mpm.Grid(res)
    X = grid.node_positions()
    v_hat = rng.normal(size=X.shape)
    m = rng.uniform(0.1, 1.0, len(X))
    b = RigidBoundary(0, Circle(0.1), [0.5, 0.5, 0, 0.3, -0.2, 1.0])
    v, led, _ = grid_contact(v_hat, X, m, np.ones(len(X), bool), [b], ContactParams.for_grid(res, model="grid"))
    dp = (m[:, None] * (v - v_hat)).sum(axis=0)
    np.testing.assert_allclose(led[0][:2], -dp, rtol=1e-10)
    assert np.any(v != v_hat)


def test_particle_penalty_worked_example():
    params = ContactParams(model="particle", k=400.0)
    b = RigidBoundary(0, Box((0.2, 0.05)), [0.5, 0.25, 0, 0, 0, 0])
    x = np.array([[0.5, 0.29]])                        # 0.01 below the top face
    pen, led, _ = particle_contact(x, [b], params, 1e-4)
    np.testing.assert_allclose(pen[0], [0.0, 4e-4], atol=1e-15)
    np.testing.assert_allclose(led[0][:2] / 1e-4, [0.0, -4.0])


def test_particle_penalty_outside_zero():
    params = ContactParams(model="particle")
    b = RigidBoundary(0, Box((0.2, 0.05)), [0.5, 0.25, 0, 0, 0, 0])
    pen, led, _ = particle_contact(np.array([[0.5, 0.31], [0.1, 0.9]]), [b], params, 1e-4)
    np.testing.assert_array_equal(pen, 0.0)
    np.testing.assert_array_equal(led[0], 0.0)


def _forecast_setup(res=32, body=None, alpha=0.2):
    body_state, x, v = wall_scene(res)
    if body is not None:
        body_state = body
    p = mpm.ParticleSet(x, v, 1e-3, 1e-4, mpm.ELASTIC, 0.0, 0.0, 0.0)
    stn = mpm.compute_stencil(x, res)
    grid = mpm.Grid(res)
    mpm.p2g(p, np.zeros((len(x), 2, 2)), stn, grid)
    v_hat, _ = mpm.grid_normalize(grid, (0.0, 0.0), 1e-4, p.mass.sum())
    params = ContactParams.for_grid(res, alpha=alpha)
    return p, stn, grid, v_hat, params, body_state


def test_forecast_no_contact_bitwise_noop():
    p, stn, grid, v_hat, params, _ = _forecast_setup(body=np.array([0.5, 0.9, 0, 0, 0, 0]))
    b = RigidBoundary(0, Circle(0.02), [0.1, 0.9, 0, 0, 0, 0])
    v_g, led, _ = forecast_contact(v_hat, stn, p.x, p.mass, [b], params, 1e-4, grid.n_nodes)
    assert v_g.tobytes() == v_hat.tobytes()
    np.testing.assert_array_equal(led[0], 0.0)


def test_forecast_alpha_zero_noop():
    p, stn, grid, v_hat, params, body_state = _forecast_setup()
    params.alpha = 0.0
    b = RigidBoundary(0, Box((0.2, 0.05)), body_state)
    v_g, _, _ = forecast_contact(v_hat, stn, p.x, p.mass, [b], params, 1e-4, grid.n_nodes)
    np.testing.assert_array_equal(v_g, v_hat)


def test_forecast_action_reaction():
    p, stn, grid, v_hat, params, body_state = _forecast_setup()
    b = RigidBoundary(0, Box((0.2, 0.05)), body_state)
    v_g, led, cache = forecast_contact(v_hat, stn, p.x, p.mass, [b], params, 1e-4, grid.n_nodes)
    dp = (p.mass[:, None] * (cache["v_tgt"] - cache["v_init"])).sum(axis=0)
    assert np.abs(dp).max() > 0
    np.testing.assert_allclose(led[0][:2], -dp, rtol=1e-10)
    before, after = cache["objective"]
    assert after < before


def test_forecast_pose_gradient_matches_fd():
    p, stn, grid, v_hat, params, body_state = _forecast_setup()
    body_state = np.array([0.5, 0.252, 0.05, 0.1, 0.0, 0.3])
    w = np.random.default_rng(6).normal(size=v_hat.shape)

    def loss(state):
        b = RigidBoundary(0, Box((0.2, 0.05)), state)
        v_g, led, _ = forecast_contact(v_hat, stn, p.x, p.mass, [b], params, 1e-4, grid.n_nodes)
        return (w * v_g).sum() + led[0].sum()

    b = RigidBoundary(0, Box((0.2, 0.05)), body_state)
    v_g, led, cache = forecast_contact(v_hat, stn, p.x, p.mass, [b], params, 1e-4, grid.n_nodes)
    forecast_contact_vjp(cache, stn, p.x, p.mass, [b], params, 1e-4, grid.n_nodes, w, [np.ones(3)])
    h = 1e-7
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        fd = (loss(body_state + e) - loss(body_state - e)) / (2 * h)
        assert b.grad[i] == pytest.approx(fd, rel=1e-3, abs=1e-8)
