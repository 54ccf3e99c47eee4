"""MLS-MPM transfers and constitutive models, forward and adjoint (2D).

The forward stages are plain functions over a :class:`ParticleSet` and a
:class:`Grid`.  Each stage has a matching ``*_vjp`` that pulls gradients back
through it using values cached on the forward pass.  Scatter-adds go through
``np.bincount``, which accumulates in index order, so every transfer is
bitwise reproducible.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SimulationFault

ELASTIC, PLASTIC, LIQUID = 0, 1, 2
MATERIALS = {"elastic": ELASTIC, "plastic": PLASTIC, "liquid": LIQUID}
MATERIAL_NAMES = {v: k for k, v in MATERIALS.items()}

WALL_CELLS = 3
CFL_LIMIT = 0.3

_OFFSETS = np.array([(i, j) for i in range(3) for j in range(3)], dtype=np.int64)


@dataclass
class ParticleSet:
    x: np.ndarray
    v: np.ndarray
    mass: np.ndarray
    vol: np.ndarray
    material: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    yield_stress: np.ndarray
    C: np.ndarray = None
    F: np.ndarray = None
    J: np.ndarray = None
    pending_impulse: np.ndarray = None

    def __post_init__(self):
        n = len(self.x)
        self.x = np.asarray(self.x, dtype=float).reshape(n, 2)
        self.v = np.asarray(self.v, dtype=float).reshape(n, 2)
        self.mass = np.broadcast_to(np.asarray(self.mass, dtype=float), (n,)).copy()
        self.vol = np.broadcast_to(np.asarray(self.vol, dtype=float), (n,)).copy()
        self.material = np.broadcast_to(np.asarray(self.material, dtype=np.int64), (n,)).copy()
        self.mu = np.broadcast_to(np.asarray(self.mu, dtype=float), (n,)).copy()
        self.lam = np.broadcast_to(np.asarray(self.lam, dtype=float), (n,)).copy()
        self.yield_stress = np.broadcast_to(np.asarray(self.yield_stress, dtype=float), (n,)).copy()
        if self.C is None:
            self.C = np.zeros((n, 2, 2))
        if self.F is None:
            self.F = np.tile(np.eye(2), (n, 1, 1))
        if self.J is None:
            self.J = np.ones(n)
        if np.any(self.mass <= 0):
            raise ConfigError("particle masses must be positive")

    def __len__(self):
        return len(self.x)

    @property
    def n(self):
        return len(self.x)

    def state(self):
        """The differentiable part of the particle state."""
        return {"x": self.x.copy(), "v": self.v.copy(), "C": self.C.copy(),
                "F": self.F.copy(), "J": self.J.copy()}

    def load_state(self, s):
        self.x, self.v, self.C, self.F, self.J = (s[k].copy() for k in ("x", "v", "C", "F", "J"))

    def copy(self):
        out = ParticleSet(self.x.copy(), self.v.copy(), self.mass, self.vol, self.material,
                          self.mu, self.lam, self.yield_stress,
                          self.C.copy(), self.F.copy(), self.J.copy())
        if self.pending_impulse is not None:
            out.pending_impulse = self.pending_impulse.copy()
        return out


@dataclass
class Grid:
    res: int
    p: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.p is None:
            self.clear()

    @property
    def dx(self):
        return 1.0 / self.res

    @property
    def nodes_per_axis(self):
        return self.res + 1

    @property
    def n_nodes(self):
        return (self.res + 1) ** 2

    def clear(self):
        nn = (self.res + 1) ** 2
        self.p = np.zeros((nn, 2))
        self.m = np.zeros(nn)
        self.v = np.zeros((nn, 2))

    def node_positions(self):
        k = np.arange(self.res + 1) * self.dx
        return np.stack(np.meshgrid(k, k, indexing="ij"), axis=-1).reshape(-1, 2)

    def wall_mask(self):
        k = np.arange(self.res + 1)
        edge = (k < WALL_CELLS) | (k > self.res - WALL_CELLS)
        return (edge[:, None] | edge[None, :]).reshape(-1)


@dataclass
class Stencil:
    """Quadratic B-spline weights for the 3x3 nodes around each particle."""

    idx: np.ndarray   # (N, 9) flat node ids
    w: np.ndarray     # (N, 9)
    dw: np.ndarray    # (N, 9, 2) d w / d x
    dpos: np.ndarray  # (N, 9, 2) node position minus particle position


def compute_stencil(x, res: int) -> Stencil:
    dx = 1.0 / res
    X = x * res
    base = np.floor(X - 0.5).astype(np.int64)
    bad = np.nonzero(np.any(base < 0, axis=1) | np.any(base + 2 > res, axis=1))[0]
    if len(bad):
        raise SimulationFault(f"particle {int(bad[0])} left the domain margin at {x[bad[0]].tolist()}")
    fx = X - base
    w = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2])  # (3, N, 2)
    dwf = np.stack([fx - 1.5, -2.0 * (fx - 1.0), fx - 0.5])
    oi, oj = _OFFSETS[:, 0], _OFFSETS[:, 1]
    wx, wy = w[oi, :, 0].T, w[oj, :, 1].T  # (N, 9)
    W = wx * wy
    dW = np.stack([dwf[oi, :, 0].T * wy, wx * dwf[oj, :, 1].T], axis=-1) * res
    dpos = (_OFFSETS[None, :, :] - fx[:, None, :]) * dx
    idx = (base[:, None, 0] + oi[None]) * (res + 1) + base[:, None, 1] + oj[None]
    return Stencil(idx=idx, w=W, dw=dW, dpos=dpos)


def scatter(idx, vals, n_nodes):
    """Deterministic sum of ``vals`` (N, 9[, k]) into nodes."""
    flat = idx.ravel()
    if vals.ndim == 2:
        return np.bincount(flat, weights=vals.ravel(), minlength=n_nodes)
    k = vals.shape[-1]
    vals = vals.reshape(-1, k)
    return np.stack([np.bincount(flat, weights=vals[:, c], minlength=n_nodes) for c in range(k)], axis=1)


def gather(stencil: Stencil, node_vals):
    """Interpolate a node vector field to particles, W^T v."""
    return (stencil.w[:, None, :] @ node_vals[stencil.idx])[:, 0]


def gather_vjp(stencil: Stencil, node_vals, g_out, n_nodes):
    """Returns (grad on node values, grad on stencil weights)."""
    g_nodes = scatter(stencil.idx, stencil.w[:, :, None] * g_out[:, None, :], n_nodes)
    g_w = (node_vals[stencil.idx] @ g_out[:, :, None])[:, :, 0]
    return g_nodes, g_w


def stencil_vjp(stencil: Stencil, g_w, g_dpos):
    """Pull stencil-weight and node-offset gradients back to positions."""
    g = (g_w[:, None, :] @ stencil.dw)[:, 0]
    if g_dpos is not None:
        g = g - g_dpos.sum(axis=1)
    return g


# ---------------------------------------------------------------------------
# constitutive models


def _polar_rotation(F):
    a, b, c, d = F[:, 0, 0], F[:, 0, 1], F[:, 1, 0], F[:, 1, 1]
    theta = np.arctan2(c - b, a + d)
    co, si = np.cos(theta), np.sin(theta)
    R = np.stack([np.stack([co, -si], -1), np.stack([si, co], -1)], -2)
    return R, theta


def kirchhoff_stress(F, J, material, mu, lam):
    """Kirchhoff stress tau = P F^T per particle."""
    n = len(F)
    tau = np.zeros((n, 2, 2))
    solid = material != LIQUID
    if np.any(solid):
        Fs = F[solid]
        det = Fs[:, 0, 0] * Fs[:, 1, 1] - Fs[:, 0, 1] * Fs[:, 1, 0]
        if np.any(~(det > 0)):
            i = int(np.nonzero(solid)[0][np.nonzero(~(det > 0))[0][0]])
            raise SimulationFault(f"inverted deformation gradient at particle {i}")
        R, _ = _polar_rotation(Fs)
        m, l = mu[solid], lam[solid]
        tau[solid] = 2 * m[:, None, None] * (Fs - R) @ Fs.transpose(0, 2, 1)
        tau[solid] += (l * (det - 1) * det)[:, None, None] * np.eye(2)
    liq = ~solid
    if np.any(liq):
        Jl = J[liq]
        tau[liq] = (lam[liq] * (Jl - 1) * Jl)[:, None, None] * np.eye(2)
    if not np.all(np.isfinite(tau)):
        i = int(np.nonzero(~np.isfinite(tau).all(axis=(1, 2)))[0][0])
        raise SimulationFault(f"non-finite stress at particle {i}")
    return tau


def kirchhoff_stress_vjp(F, J, material, mu, lam, g_tau):
    """Returns (dL/dF, dL/dJ) given dL/dtau."""
    g_F = np.zeros_like(F)
    g_J = np.zeros(len(F))
    solid = material != LIQUID
    if np.any(solid):
        Fs, G = F[solid], g_tau[solid]
        m, l = mu[solid][:, None, None], lam[solid]
        R, theta = _polar_rotation(Fs)
        FR = Fs - R
        gF = 2 * m * (G @ Fs + G.transpose(0, 2, 1) @ FR)
        gR = -2 * m * G @ Fs
        co, si = np.cos(theta), np.sin(theta)
        dR = np.stack([np.stack([-si, -co], -1), np.stack([co, -si], -1)], -2)
        g_theta = np.einsum("nij,nij->n", gR, dR)
        a, b, c, d = Fs[:, 0, 0], Fs[:, 0, 1], Fs[:, 1, 0], Fs[:, 1, 1]
        xx, yy = a + d, c - b
        r2 = xx * xx + yy * yy
        gx = -g_theta * yy / r2
        gy = g_theta * xx / r2
        gF[:, 0, 0] += gx
        gF[:, 1, 1] += gx
        gF[:, 1, 0] += gy
        gF[:, 0, 1] -= gy
        det = a * d - b * c
        g_det = l * (2 * det - 1) * np.trace(G, axis1=1, axis2=2)
        cof = np.stack([np.stack([d, -c], -1), np.stack([-b, a], -1)], -2)
        gF += g_det[:, None, None] * cof
        g_F[solid] = gF
    liq = ~solid
    if np.any(liq):
        Jl = J[liq]
        g_J[liq] = lam[liq] * (2 * Jl - 1) * np.trace(g_tau[liq], axis1=1, axis2=2)
    return g_F, g_J


def stress_scale(particles: ParticleSet, dt, res):
    return -dt * particles.vol * 4.0 * res * res


def compute_stress_momentum(particles: ParticleSet, dt: float, res: int):
    """Affine internal-force momentum per particle (N, 2, 2).

    Scattered as ``S_p @ (x_i - x_p)`` with the stencil weight, so node ``i``
    receives the discrete internal-force impulse over ``dt``.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    tau = kirchhoff_stress(particles.F, particles.J, particles.material, particles.mu, particles.lam)
    return stress_scale(particles, dt, res)[:, None, None] * tau


def clamp_singular_values(F, lo, hi):
    """Project singular values of each F into [lo, hi]; returns (F', svd cache)."""
    U, s, Vt = np.linalg.svd(F)
    sc = np.clip(s, lo[:, None], hi[:, None])
    out = U @ (sc[:, :, None] * Vt)
    return out, (U, s, Vt, sc)


def clamp_singular_values_vjp(cache, lo, hi, g_out):
    U, s, Vt, sc = cache
    A = U.transpose(0, 2, 1) @ g_out @ Vt.transpose(0, 2, 1)
    active = (s >= lo[:, None]) & (s <= hi[:, None])
    B = np.zeros_like(A)
    B[:, 0, 0] = A[:, 0, 0] * active[:, 0]
    B[:, 1, 1] = A[:, 1, 1] * active[:, 1]
    sym = 0.5 * (A[:, 0, 1] + A[:, 1, 0])
    skw = 0.5 * (A[:, 0, 1] - A[:, 1, 0])
    ds = s[:, 0] - s[:, 1]
    close = np.abs(ds) < 1e-12
    c_sym = np.where(close, 0.5 * (active[:, 0] + active[:, 1]),
                     (sc[:, 0] - sc[:, 1]) / np.where(close, 1.0, ds))
    c_skw = (sc[:, 0] + sc[:, 1]) / (s[:, 0] + s[:, 1])
    B[:, 0, 1] = c_sym * sym + c_skw * skw
    B[:, 1, 0] = c_sym * sym - c_skw * skw
    return U @ B @ Vt


# ---------------------------------------------------------------------------
# transfers


def p2g(particles: ParticleSet, stress_mom, stencil: Stencil, grid: Grid, ext_momentum=None):
    """Scatter momentum and mass to the grid (in place on ``grid``).

    Pending impulses registered with :func:`apply_particle_impulse` are added
    to the scattered momentum and consumed.
    """
    affine = stress_mom + particles.mass[:, None, None] * particles.C
    mom = particles.mass[:, None] * particles.v
    if ext_momentum is not None:
        mom = mom + ext_momentum
    if particles.pending_impulse is not None:
        mom = mom + particles.pending_impulse
        particles.pending_impulse = None
    contrib = mom[:, None, :] + stencil.dpos @ affine.transpose(0, 2, 1)
    nn = grid.n_nodes
    grid.p = scatter(stencil.idx, stencil.w[:, :, None] * contrib, nn)
    grid.m = scatter(stencil.idx, stencil.w * particles.mass[:, None], nn)
    grid.v = np.zeros_like(grid.p)
    return grid, (mom, affine, contrib)


def p2g_vjp(particles: ParticleSet, stencil: Stencil, cache, g_p, g_m):
    """Returns (g_mom, g_affine, g_w, g_dpos)."""
    mom, affine, contrib = cache
    gp = g_p[stencil.idx]  # (N, 9, 2)
    w = stencil.w
    g_mom = (w[:, None, :] @ gp)[:, 0]
    g_affine = (w[:, :, None] * gp).transpose(0, 2, 1) @ stencil.dpos
    g_dpos = w[:, :, None] * (gp @ affine)
    g_w = (gp * contrib).sum(-1) + g_m[stencil.idx] * particles.mass[:, None]
    return g_mom, g_affine, g_w, g_dpos


def mass_epsilon(grid: Grid, total_mass: float):
    return 1e-12 * total_mass / grid.n_nodes


def grid_normalize(grid: Grid, gravity, dt, total_mass=None):
    """v_hat = p / m at nodes above the mass epsilon, plus gravity; zero elsewhere."""
    if total_mass is None:
        total_mass = grid.m.sum()
    active = grid.m > mass_epsilon(grid, total_mass)
    ms = np.where(active, grid.m, 1.0)
    v = np.where(active[:, None], grid.p / ms[:, None] + np.asarray(gravity) * dt, 0.0)
    return v, active


def grid_normalize_vjp(grid: Grid, active, g_v):
    ms = np.where(active, grid.m, 1.0)
    g_v = np.where(active[:, None], g_v, 0.0)
    g_p = g_v / ms[:, None]
    g_m = -(g_v * grid.p).sum(1) / ms**2
    return g_p, np.where(active, g_m, 0.0)


def grid_op(grid: Grid, gravity, dt, contact_hook=None, total_mass=None):
    """Grid update: normalize momentum, add gravity, apply contact and walls."""
    v, active = grid_normalize(grid, gravity, dt, total_mass)
    if contact_hook is not None:
        v = contact_hook(v)
    v[grid.wall_mask()] = 0.0
    grid.v = v
    return grid


def g2p(grid: Grid, particles: ParticleSet, stencil: Stencil, dt: float, faults: Counter | None = None):
    """Gather velocities, rebuild C, update F/J and advect (in place)."""
    res = grid.res
    vg = grid.v[stencil.idx]  # (N, 9, 2)
    v_new = (stencil.w[:, None, :] @ vg)[:, 0]
    C_new = 4.0 * res * res * ((stencil.w[:, :, None] * vg).transpose(0, 2, 1) @ stencil.dpos)
    F_pre = (np.eye(2) + dt * C_new) @ particles.F
    liquid = particles.material == LIQUID
    plastic = particles.material == PLASTIC
    clamp_cache = None
    F_new = F_pre.copy()
    if np.any(plastic):
        y = particles.yield_stress[plastic]
        F_new[plastic], clamp_cache = clamp_singular_values(F_pre[plastic], 1.0 - y, 1.0 + y)
    J_new = particles.J.copy()
    tr = C_new[:, 0, 0] + C_new[:, 1, 1]
    J_new[liquid] = particles.J[liquid] * (1.0 + dt * tr[liquid])
    F_new[liquid] = np.eye(2)
    x_raw = particles.x + dt * v_new
    lo, hi = grid.dx, 1.0 - grid.dx
    x_new = np.clip(x_raw, lo, hi)
    clipped = x_new != x_raw
    if np.any(clipped) and faults is not None:
        faults["domain_clamp"] += int(np.any(clipped, axis=1).sum())
    cache = dict(x=particles.x, F=particles.F, J=particles.J, C_new=C_new, F_pre=F_pre,
                 clamp_cache=clamp_cache, clipped=clipped, vg=vg)
    particles.x, particles.v, particles.C, particles.F, particles.J = x_new, v_new, C_new, F_new, J_new
    return particles, cache


def g2p_vjp(particles: ParticleSet, stencil: Stencil, cache, dt, res, g_x, g_v, g_C, g_F, g_J, n_nodes):
    """Gradients w.r.t. (grid v, old x [direct path only], old F, old J, stencil w, dpos).

    ``particles`` supplies the material arrays only.
    """
    C_new, F_old, J_old = cache["C_new"], cache["F"], cache["J"]
    liquid = particles.material == LIQUID
    plastic = particles.material == PLASTIC
    g_xn = np.where(cache["clipped"], 0.0, g_x)
    g_x_old = g_xn.copy()
    g_vn = g_v + dt * g_xn

    g_Fpre = g_F.copy()
    g_Fpre[liquid] = 0.0
    if np.any(plastic):
        y = particles.yield_stress[plastic]
        g_Fpre[plastic] = clamp_singular_values_vjp(cache["clamp_cache"], 1.0 - y, 1.0 + y, g_F[plastic])
    g_Cn = g_C + dt * g_Fpre @ F_old.transpose(0, 2, 1)
    g_F_old = (np.eye(2) + dt * C_new).transpose(0, 2, 1) @ g_Fpre
    g_J_old = np.zeros_like(J_old)
    tr = C_new[:, 0, 0] + C_new[:, 1, 1]
    g_J_old[liquid] = g_J[liquid] * (1.0 + dt * tr[liquid])
    gtr = np.where(liquid, g_J * J_old * dt, 0.0)
    g_Cn = g_Cn + gtr[:, None, None] * np.eye(2)

    k4 = 4.0 * res * res
    vg = cache["vg"]
    w = stencil.w
    # v_new = sum w vg ; C_new = k4 sum w vg dpos^T
    per_node = g_vn[:, None, :] + k4 * stencil.dpos @ g_Cn.transpose(0, 2, 1)
    g_grid_v = scatter(stencil.idx, w[:, :, None] * per_node, n_nodes)
    g_w = (vg * per_node).sum(-1)
    g_dpos = k4 * w[:, :, None] * (vg @ g_Cn)
    return g_grid_v, g_x_old, g_F_old, g_J_old, g_w, g_dpos


def apply_particle_impulse(particles: ParticleSet, selection, impulse_per_particle):
    """Register an impulse on selected particles for the next p2g only."""
    sel = np.asarray(selection, dtype=np.int64)
    if sel.size and (sel.min() < 0 or sel.max() >= particles.n):
        raise ConfigError(f"impulse selection index out of range [0, {particles.n})")
    if particles.pending_impulse is None:
        particles.pending_impulse = np.zeros((particles.n, 2))
    np.add.at(particles.pending_impulse, sel, np.asarray(impulse_per_particle, dtype=float))
    return particles


@dataclass
class CflReport:
    cfl: float
    limit: float = CFL_LIMIT
    ok: bool = field(init=False)

    def __post_init__(self):
        self.ok = self.cfl < self.limit


def cfl_check(particles: ParticleSet, grid: Grid, dt: float, strict: bool = False) -> CflReport:
    speed = float(np.sqrt((particles.v ** 2).sum(axis=1)).max()) if particles.n else 0.0
    rep = CflReport(speed * dt * grid.res)
    if strict and not rep.ok:
        raise SimulationFault(f"CFL number {rep.cfl:.3f} exceeds {CFL_LIMIT}")
    return rep


def mpm_step(particles: ParticleSet, grid: Grid, dt: float, gravity=(0.0, 0.0), contact_hook=None,
             faults: Counter | None = None):
    """One plain MPM substep without coupling (used by tests and tools)."""
    stencil = compute_stencil(particles.x, grid.res)
    S = compute_stress_momentum(particles, dt, grid.res)
    grid.clear()
    p2g(particles, S, stencil, grid)
    grid_op(grid, gravity, dt, contact_hook, total_mass=particles.mass.sum())
    g2p(grid, particles, stencil, dt, faults)
    return particles
