import numpy as np
import pytest

from mpmcouple.cloth import ClothModel, adjoint_cloth_step, cloth_step, internal_forces
from mpmcouple.cloth_contact import ClothMesh
from mpmcouple.errors import ConfigError

G = (0.0, -9.8)


def rope(segments=10, **kw):
    return ClothModel(ClothMesh.strip((0.3, 0.6), (0.7, 0.6), segments), **kw)


def energy(model, X, V, gravity=(0.0, 0.0)):
    kin = 0.5 * (model.mass[:, None] * V * V).sum()
    f = model.mesh.faces
    L = np.linalg.norm(X[f[:, 1]] - X[f[:, 0]], axis=1)
    stretch = 0.5 * model.stretch * ((L - model.rest_length) ** 2).sum()
    from mpmcouple.cloth import bend_angle
    bend = 0.5 * model.bending * ((bend_angle(X, model.hinges) - model.rest_angle) ** 2).sum()
    pot = -(model.mass[:, None] * X * np.asarray(gravity)).sum()
    return kin + stretch + bend + pot


def test_rest_rope_is_bitwise_still():
    m = rope(stretch=100.0, bending=0.01, damping=0.5)
    X, V = m.mesh.verts.copy(), np.zeros_like(m.mesh.verts)
    X0 = X.copy()
    for _ in range(100):
        X, V = cloth_step(m, X, V, np.zeros_like(X), np.zeros((0, 2)), 1e-2)
    assert X.tobytes() == X0.tobytes() and not V.any()


def test_hooke_two_vertices():
    m = ClothModel(ClothMesh([[0.0, 0.0], [0.1, 0.0]], [[0, 1]]), stretch=100.0)
    f = internal_forces(m, np.array([[0.0, 0.0], [0.15, 0.0]]))
    np.testing.assert_allclose(f, [[5.0, 0.0], [-5.0, 0.0]], rtol=1e-12)
    f = internal_forces(m, np.array([[0.0, 0.0], [0.0, 0.08]]))
    np.testing.assert_allclose(f, [[0.0, -2.0], [0.0, 2.0]], rtol=1e-12, atol=1e-15)


def test_hanging_rope_is_symmetric():
    m = rope(stretch=100.0, bending=0.001, damping=3.0, control=[0, 10])
    X, V = m.mesh.verts.copy(), np.zeros_like(m.mesh.verts)
    for _ in range(2000):
        X, V = cloth_step(m, X, V, np.zeros_like(X), np.zeros((2, 2)), 1e-2, G)
    assert np.abs(V).max() < 1e-6
    mirror = X[::-1]
    assert np.abs(X[:, 0] + mirror[:, 0] - 1.0).max() < 1e-6
    assert np.abs(X[:, 1] - mirror[:, 1]).max() < 1e-6
    assert X[5, 1] < 0.59


def test_free_rope_conserves_momentum():
    m = rope(stretch=80.0, bending=0.01)
    rng = np.random.default_rng(0)
    X = m.mesh.verts + 0.01 * rng.normal(size=m.mesh.verts.shape)
    V = rng.normal(size=X.shape)
    p0 = (m.mass[:, None] * V).sum(axis=0)
    for _ in range(50):
        X, V = cloth_step(m, X, V, np.zeros_like(X), np.zeros((0, 2)), 1e-2)
        p = (m.mass[:, None] * V).sum(axis=0)
        assert np.abs(p - p0).max() < 1e-12
        p0 = p


def test_damped_energy_non_increasing_over_windows():
    m = rope(stretch=100.0, bending=0.005, damping=1.0, control=[0])
    rng = np.random.default_rng(1)
    X = m.mesh.verts + 0.01 * rng.normal(size=m.mesh.verts.shape)
    X[0] = m.mesh.verts[0]
    V = np.zeros_like(X)
    E = [energy(m, X, V, G)]
    for _ in range(400):
        X, V = cloth_step(m, X, V, np.zeros_like(X), np.zeros((1, 2)), 1e-3, G)
        E.append(energy(m, X, V, G))
    E = np.array(E)
    assert np.all(E[100:] <= E[:-100] + 1e-9)


def test_substeps_violating_stability_rejected():
    with pytest.raises(ConfigError, match="cloths.substeps"):
        rope(stretch=1e6, substeps=1).n_substeps(1e-2)


def test_control_vertex_out_of_range():
    with pytest.raises(ConfigError, match="cloths.control"):
        rope(control=[11])


# ---------------------------------------------------------------- adjoint

def test_pinned_vertex_force_gradient_zero():
    m = rope(stretch=50.0, control=[0, 10])
    X, V = m.mesh.verts.copy(), np.zeros_like(m.mesh.verts)
    _, _, g_f, _ = adjoint_cloth_step(m, X, V, np.zeros_like(X), np.zeros((2, 2)), 1e-2,
                                      np.ones_like(X), np.ones_like(X), G)
    np.testing.assert_array_equal(g_f[[0, 10]], 0.0)
    assert np.abs(g_f[1:10]).min() > 0


def test_single_free_vertex_dt2_over_m():
    m = ClothModel(ClothMesh([[0.0, 0.0], [0.1, 0.0]], [[0, 1]]), stretch=0.0, control=[0])
    dt = 1e-2
    X, V = m.mesh.verts.copy(), np.zeros((2, 2))
    g_X = np.zeros((2, 2))
    g_X[1, 0] = 1.0
    _, _, g_f, _ = adjoint_cloth_step(m, X, V, np.zeros((2, 2)), np.zeros((1, 2)), dt, g_X, np.zeros((2, 2)))
    assert g_f[1, 0] == pytest.approx(dt * dt / m.mass[1], rel=1e-14)
    assert g_f[1, 1] == 0.0


def test_twenty_step_adjoint_matches_fd():
    m = rope(8, stretch=60.0, bending=0.02, damping=0.4, control=[0, 8])
    rng = np.random.default_rng(2)
    X0 = m.mesh.verts + 0.01 * rng.normal(size=m.mesh.verts.shape)
    V0 = 0.1 * rng.normal(size=X0.shape)
    N, dt = 20, 1e-2
    F = 0.01 * rng.normal(size=(N,) + X0.shape)
    C = 0.1 * rng.normal(size=(N, 2, 2))
    wX, wV = rng.normal(size=X0.shape), rng.normal(size=X0.shape)

    def loss(X, V, F, C):
        for n in range(N):
            X, V = cloth_step(m, X, V, F[n], C[n], dt, G)
        return float((wX * X).sum() + (wV * V).sum())

    path = [(X0, V0)]
    for n in range(N):
        path.append(cloth_step(m, *path[-1], F[n], C[n], dt, G))
    gX, gV = wX.copy(), wV.copy()
    gF, gC = np.zeros_like(F), np.zeros_like(C)
    for n in reversed(range(N)):
        gX, gV, gF[n], gC[n] = adjoint_cloth_step(m, *path[n], F[n], C[n], dt, gX, gV, G)

    h = 1e-6
    probes = [("X", (3, 1)), ("V", (4, 0)), ("F", (2, 5, 1)), ("F", (17, 3, 0)), ("C", (0, 1, 1)), ("C", (12, 0, 0))]
    for name, idx in probes:
        args = dict(X=X0, V=V0, F=F, C=C)
        plus = {k: v.copy() for k, v in args.items()}
        minus = {k: v.copy() for k, v in args.items()}
        plus[name][idx] += h
        minus[name][idx] -= h
        fd = (loss(**plus) - loss(**minus)) / (2 * h)
        ad = dict(X=gX, V=gV, F=gF, C=gC)[name][idx]
        assert abs(ad - fd) / abs(fd) < 1e-5, (name, idx, ad, fd)
