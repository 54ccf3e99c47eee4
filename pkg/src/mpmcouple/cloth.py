"""Mass-spring rope dynamics with stretch and bending springs.

Free vertices use symplectic Euler; control vertices move with prescribed
velocities and ignore forces.  One call to :func:`cloth_step` covers one
manipulator step and runs as many internal substeps as the stability bound
requires.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cloth_contact import ClothMesh
from .errors import ConfigError


def _perp(r):
    return np.stack([-r[..., 1], r[..., 0]], axis=-1)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


@dataclass
class ClothModel:
    """Static description of a rope: topology, rest shape and material."""

    mesh: ClothMesh
    stretch: float = 100.0
    bending: float = 0.0
    damping: float = 0.0
    line_density: float = 1.0
    control: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    gravity_scale: float = 1.0
    substeps: int | None = None

    def __post_init__(self):
        if self.stretch < 0 or self.bending < 0:
            raise ConfigError("stiffness must be non-negative", "cloths.stretch")
        if self.damping < 0:
            raise ConfigError("damping must be non-negative", "cloths.damping")
        self.control = np.asarray(self.control, dtype=np.int64).reshape(-1)
        nv = len(self.mesh.verts)
        if self.control.size and (self.control.min() < 0 or self.control.max() >= nv):
            raise ConfigError("control vertex out of range", "cloths.control")
        if len(np.unique(self.control)) != len(self.control):
            raise ConfigError("control vertices must be distinct", "cloths.control")
        faces = self.mesh.faces
        self.rest_length = self.mesh.rest_lengths.copy()
        share = np.zeros(nv)
        np.add.at(share, faces[:, 0], 0.5 * self.rest_length)
        np.add.at(share, faces[:, 1], 0.5 * self.rest_length)
        self.mass = self.line_density * share
        self.mesh.mass = self.mass
        self.free = np.ones(nv, dtype=bool)
        self.free[self.control] = False
        # bending hinges: (prev, mid, next) with faces (prev, mid) and (mid, next)
        into = {int(b): int(a) for a, b in faces}
        outof = {int(a): int(b) for a, b in faces}
        hinges = [(into[v], v, outof[v]) for v in range(nv) if v in into and v in outof]
        self.hinges = np.array(hinges, dtype=np.int64).reshape(-1, 3)
        X = self.mesh.verts
        self.rest_angle = bend_angle(X, self.hinges)

    def stable_dt(self):
        kmax = self.stretch
        if self.bending and len(self.hinges):
            kmax += 4.0 * self.bending / self.rest_length.min() ** 2
        if kmax == 0:
            return math.inf
        return 0.5 * math.sqrt(self.mass.min() / kmax)

    def n_substeps(self, dt):
        limit = self.stable_dt()
        if self.substeps is not None:
            if dt / self.substeps >= limit:
                raise ConfigError(f"{self.substeps} substeps violate the stability bound "
                                  f"dt_sub < {limit:.3g}", "cloths.substeps")
            return self.substeps
        return int(dt // limit) + 1


def bend_angle(X, hinges):
    if len(hinges) == 0:
        return np.zeros(0)
    e1 = X[hinges[:, 1]] - X[hinges[:, 0]]
    e2 = X[hinges[:, 2]] - X[hinges[:, 1]]
    return np.arctan2(_cross(e1, e2), np.einsum("pc,pc->p", e1, e2))


def internal_forces(model: ClothModel, X):
    """Stretch and bending forces (V, 2)."""
    f = np.zeros_like(X)
    faces = model.mesh.faces
    e = X[faces[:, 1]] - X[faces[:, 0]]
    L = np.sqrt((e ** 2).sum(axis=1))
    fs = (model.stretch * (L - model.rest_length) / L)[:, None] * e
    np.add.at(f, faces[:, 0], fs)
    np.add.at(f, faces[:, 1], -fs)
    if model.bending and len(model.hinges):
        h = model.hinges
        e1 = X[h[:, 1]] - X[h[:, 0]]
        e2 = X[h[:, 2]] - X[h[:, 1]]
        phi = np.arctan2(_cross(e1, e2), np.einsum("pc,pc->p", e1, e2))
        k = model.bending * (phi - model.rest_angle)
        # d phi / d e2 = perp(e2)/|e2|^2, d phi / d e1 = -perp(e1)/|e1|^2
        a1 = -_perp(e1) / (e1 ** 2).sum(axis=1)[:, None]
        a2 = _perp(e2) / (e2 ** 2).sum(axis=1)[:, None]
        g0, g1, g2 = -a1, a1 - a2, a2
        for col, g in zip(range(3), (g0, g1, g2)):
            np.add.at(f, h[:, col], -k[:, None] * g)
    return f


def _angle_hess(e):
    """Hessian of atan2 angle of e, as (n, 2, 2)."""
    ee = (e ** 2).sum(axis=1)
    P = np.array([[0.0, -1.0], [1.0, 0.0]])
    return P[None] / ee[:, None, None] - 2 * np.einsum("pi,pj->pij", _perp(e), e) / ee[:, None, None] ** 2


def internal_forces_jvp(model: ClothModel, X, U):
    """Directional derivative of :func:`internal_forces` along U (symmetric, so also the VJP)."""
    out = np.zeros_like(X)
    faces = model.mesh.faces
    e = X[faces[:, 1]] - X[faces[:, 0]]
    de = U[faces[:, 1]] - U[faces[:, 0]]
    L = np.sqrt((e ** 2).sum(axis=1))
    u = e / L[:, None]
    ud = np.einsum("pc,pc->p", u, de)
    r = model.rest_length / L
    dfs = model.stretch * ((1 - r)[:, None] * (de - ud[:, None] * u) + ud[:, None] * u)
    np.add.at(out, faces[:, 0], dfs)
    np.add.at(out, faces[:, 1], -dfs)
    if model.bending and len(model.hinges):
        h = model.hinges
        e1 = X[h[:, 1]] - X[h[:, 0]]
        e2 = X[h[:, 2]] - X[h[:, 1]]
        d1 = U[h[:, 1]] - U[h[:, 0]]
        d2 = U[h[:, 2]] - U[h[:, 1]]
        phi = np.arctan2(_cross(e1, e2), np.einsum("pc,pc->p", e1, e2))
        k = model.bending * (phi - model.rest_angle)
        a1 = -_perp(e1) / (e1 ** 2).sum(axis=1)[:, None]
        a2 = _perp(e2) / (e2 ** 2).sum(axis=1)[:, None]
        dphi = np.einsum("pc,pc->p", a1, d1) + np.einsum("pc,pc->p", a2, d2)
        da1 = -np.einsum("pij,pj->pi", _angle_hess(e1), d1)
        da2 = np.einsum("pij,pj->pi", _angle_hess(e2), d2)
        dk = model.bending * dphi
        grads = (-a1, a1 - a2, a2)
        dgrads = (-da1, da1 - da2, da2)
        for col in range(3):
            np.add.at(out, h[:, col], -dk[:, None] * grads[col] - k[:, None] * dgrads[col])
    return out


def cloth_step(model: ClothModel, X, V, f_ext, control_vel, dt, gravity=(0.0, 0.0), record=None):
    """Advance one manipulator step; returns (X', V')."""
    n_sub = model.n_substeps(dt)
    h = dt / n_sub
    m = model.mass[:, None]
    g = np.asarray(gravity, dtype=float) * model.gravity_scale
    control_vel = np.asarray(control_vel, dtype=float).reshape(-1, 2)
    for _ in range(n_sub):
        if record is not None:
            record.append(X)
        f = internal_forces(model, X) - model.damping * m * V + m * g + f_ext
        Vn = V + h * f / m
        Vn[model.control] = control_vel
        V = Vn
        X = X + h * V
    return X, V


def adjoint_cloth_step(model: ClothModel, X, V, f_ext, control_vel, dt, g_X, g_V, gravity=(0.0, 0.0)):
    """Reverse of :func:`cloth_step`; returns (g_X, g_V, g_f_ext, g_control_vel)."""
    path = []
    cloth_step(model, X, V, f_ext, control_vel, dt, gravity, record=path)
    n_sub = len(path)
    h = dt / n_sub
    m = model.mass[:, None]
    free = model.free[:, None]
    g_X = np.array(g_X, dtype=float)
    g_V = np.array(g_V, dtype=float)
    g_f = np.zeros_like(g_X)
    g_c = np.zeros((len(model.control), 2))
    for Xk in reversed(path):
        # X' = X + h V' ; V' = [free] (V + h f(X, V) / m) | [control] c
        g_Vn = g_V + h * g_X
        g_c += g_Vn[model.control]
        g_Vn = np.where(free, g_Vn, 0.0)
        g_force = h * g_Vn / m
        g_f += g_force
        g_X = g_X + internal_forces_jvp(model, Xk, g_force)
        g_V = g_Vn - model.damping * m * g_force
    return g_X, g_V, g_f, g_c
