from collections import Counter

import numpy as np

from mpmcouple import mpm
from mpmcouple.coupling import StepRecord, backward, coupled_step, mpm_substep, rollout, _boundaries, _trackers
from mpmcouple.rigid import integrate_rigid
from mpmcouple.scene import build, bundled_scene, validate_scene
from mpmcouple.trajopt import Trajectory, simulate_loss


def plate_scene(model="grid", steps=150, **extra):
    data = {
        "sim": {"res": 32, "dt": 2e-4, "substeps": 10, "steps": steps, "gravity": [0.0, -9.8]},
        "mpm": {"blocks": [{"region": {"kind": "box", "center": [0.5, 0.36], "half_extents": [0.08, 0.04]},
                            "material": "elastic", "per_cell": 2, "youngs_modulus": 300.0,
                            "poisson_ratio": 0.3}]},
        "bodies": [{"shape": {"kind": "box", "half_extents": [0.2, 0.02]}, "mode": "dynamic", "mass": 1000.0,
                    "position": [0.5, 0.3], "gravity_scale": 0.0}],
        "contact": {"model": model},
    }
    for key, val in extra.items():
        data[key].update(val)
    return build(validate_scene(data))


def run_steps(b, steps, state=None):
    st = (state or b.state).copy()
    recs = []
    for n in range(steps):
        rec = StepRecord([], [], None, [], [])
        coupled_step(b.system, st, b.actions[n], Counter(), rec)
        recs.append(rec)
    return st, recs


def test_far_particles_leave_bodies_standalone():
    b = build(validate_scene({
        "sim": {"res": 32, "steps": 20},
        "mpm": {"blocks": [{"region": {"kind": "box", "center": [0.2, 0.8], "half_extents": [0.03, 0.03]}}]},
        "bodies": [{"shape": {"kind": "circle", "radius": 0.05}, "mode": "dynamic", "mass": 0.3,
                    "position": [0.7, 0.6], "twist": [0.1, 0.0, 0.5]}],
        "control": {"schedule": [{"target": "body", "value": [0.02, 0.1, 0.001]}]},
    }))
    final, _, _ = rollout(b.system, b.state, b.actions, tape=False)
    s = b.state.bodies[0]
    for a in b.actions:
        s = integrate_rigid(b.system.bodies[0], s, np.zeros(3), a, b.system.config.step_dt, b.system.config.gravity)
    assert final.bodies[0].tobytes() == s.tobytes()


def test_no_manipulators_is_plain_mpm():
    b = build(bundled_scene("minimal"))
    final, _, _ = rollout(b.system, b.state, b.actions, tape=False)
    p = b.state.particles.copy()
    cfg = b.system.config
    for _ in range(len(b.actions) * cfg.substeps):
        mpm.mpm_step(p, mpm.Grid(cfg.res), cfg.dt, cfg.gravity)
    assert final.particles.x.tobytes() == p.x.tobytes()
    assert final.particles.v.tobytes() == p.v.tobytes()


def test_plate_support_force_matches_weight():
    b = plate_scene("grid")
    weight = b.state.particles.mass.sum() * 9.8
    _, recs = run_steps(b, 150)
    support = -np.mean([r.wrenches[0][1] for r in recs[-50:]])
    assert abs(support - weight) / weight < 0.05


def test_rollout_bitwise_deterministic():
    b = build(bundled_scene("audit_cloth_mpm"))
    f1, _, _ = rollout(b.system, b.state, b.actions, tape=False)
    f2, _, _ = rollout(b.system, b.state, b.actions, tape=False)
    assert f1.particles.x.tobytes() == f2.particles.x.tobytes()
    assert all(a[0].tobytes() == c[0].tobytes() for a, c in zip(f1.cloths, f2.cloths))


def test_symmetric_scene_stays_symmetric():
    b = plate_scene("forecast", steps=20)
    x0 = b.state.particles.x
    mirror = np.array([np.argmin(np.abs(x0 - [1 - x[0], x[1]]).sum(axis=1)) for x in x0])
    assert np.abs(x0[mirror] - np.c_[1 - x0[:, 0], x0[:, 1]]).max() < 1e-14
    final, _, _ = rollout(b.system, b.state, b.actions, tape=False)
    x = final.particles.x
    assert np.abs(x[mirror, 0] - (1 - x[:, 0])).max() < 1e-10
    assert np.abs(x[mirror, 1] - x[:, 1]).max() < 1e-10
    assert np.abs(x - x0).max() > 1e-4
    assert abs(final.bodies[0][0] - 0.5) < 1e-10 and abs(final.bodies[0][2]) < 1e-10


def test_zero_steps_returns_initial_state():
    b = build(bundled_scene("audit_rigid_mpm"))
    final, tape, _ = rollout(b.system, b.state, b.actions[:0])
    assert len(tape) == 0
    assert final.particles.x.tobytes() == b.state.particles.x.tobytes()
    assert final.bodies[0].tobytes() == b.state.bodies[0].tobytes()


def test_checkpoints_reproduce_next_step():
    b = build(bundled_scene("audit_cloth_mpm"))
    _, tape, _ = rollout(b.system, b.state, b.actions)
    for n in (0, 4, 8):
        rec, nxt = tape.steps[n], tape.steps[n + 1]
        st = b.state.copy()
        st.particles.load_state(rec.substeps[0][0])
        st.pen = [p.copy() for p in rec.substeps[0][1]]
        st.bodies = [s.copy() for s in rec.bodies]
        st.cloths = [(X.copy(), V.copy()) for X, V in rec.cloths]
        coupled_step(b.system, st, rec.action)
        for k in ("x", "v", "C", "F", "J"):
            assert getattr(st.particles, k).tobytes() == nxt.substeps[0][0][k].tobytes()
        assert all(a[0].tobytes() == c[0].tobytes() and a[1].tobytes() == c[1].tobytes()
                   for a, c in zip(st.cloths, nxt.cloths))
        assert all(a.z.tobytes() == c.z.tobytes() for a, c in zip(st.pen, nxt.substeps[0][1]))


def test_single_substep_wrench_is_the_ledger():
    b = plate_scene("forecast", steps=5, sim={"substeps": 1})
    st, _ = run_steps(b, 3)
    p = st.particles.copy()
    bnds = _boundaries(b.system, st, 0.0, _trackers(b.system, st, Counter()))
    ledgers, _ = mpm_substep(b.system, p, bnds, None, Counter())
    rec = StepRecord([], [], None, [], [])
    coupled_step(b.system, st, b.actions[3], Counter(), rec)
    assert np.abs(ledgers[0]).max() > 0
    np.testing.assert_array_equal(rec.wrenches[0], ledgers[0] / b.system.config.dt)


# ------------------------------------------------------------------ reverse

def test_action_without_influence_has_zero_gradient():
    b = build(bundled_scene("audit_rigid_mpm"))
    _, _, g, _ = simulate_loss(b.system, b.state, b.actions, b.loss)
    assert np.all(g[-1] == 0.0)
    assert np.abs(g[0]).max() > 0


def test_initial_body_state_gradient_matches_fd():
    """Manipulator state -> MPM loss direction."""
    b = build(bundled_scene("audit_rigid_mpm"))

    def loss_of(state):
        traj = Trajectory(None)
        final, tape, _ = rollout(b.system, state, b.actions, tape=True,
                                 on_step=lambda n, s: (traj.bodies.append([x.copy() for x in s.bodies]),
                                                       traj.cloths.append([])))
        traj.final = final
        return b.loss.evaluate(traj), tape

    (total, _, g_final, step_grads), tape = loss_of(b.state)
    _, g0 = backward(b.system, tape, g_final, step_grads)
    h = 1e-6
    checked = 0
    for i in range(6):
        sp, sm = b.state.copy(), b.state.copy()
        sp.bodies[0][i] += h
        sm.bodies[0][i] -= h
        fd = (loss_of(sp)[0][0] - loss_of(sm)[0][0]) / (2 * h)
        ad = g0.bodies[0][i]
        if max(abs(fd), abs(ad)) > 1e-8:
            assert abs(ad - fd) / max(abs(fd), abs(ad)) < 1e-3, (i, ad, fd)
            checked += 1
    assert checked >= 3


def test_loss_change_is_linear_in_small_perturbations():
    b = build(bundled_scene("audit_rigid_mpm"))
    _, _, g, _ = simulate_loss(b.system, b.state, b.actions, b.loss)
    d = g / np.linalg.norm(g)

    def f(a):
        return simulate_loss(b.system, b.state, a, b.loss, gradient=False)[0]
    base = f(b.actions)
    h = 1e-3
    ratio = (f(b.actions + 2 * h * d) - base) / (f(b.actions + h * d) - base)
    assert 1.8 <= ratio <= 2.2
