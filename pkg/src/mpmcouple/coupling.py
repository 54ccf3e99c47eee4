"""Two-way coupling of MPM with rigid bodies and ropes, forward and reverse.

One coupled step runs ``K`` MPM substeps with the manipulators as moving
boundaries, averages the reaction impulses they collected into a force, and
then advances every manipulator once with that force and its action.  The
reverse pass walks the tape backwards: manipulator adjoints first, then the
averaged force is handed back to every substep's ledger, then the substeps
are reversed, each re-running its own forward from the recorded state to
rebuild its caches.
"""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import mpm
from .cloth import ClothModel, adjoint_cloth_step, cloth_step
from .cloth_contact import ClothBoundary, ClothTracker, NeighborhoodTable, build_neighborhoods
from .contact import (FORECAST, GRID, PARTICLE, ContactParams, RigidBoundary, forecast_contact,
                      forecast_contact_vjp, grid_contact, grid_contact_vjp, particle_contact,
                      particle_contact_vjp)
from .errors import ConfigError, SimulationFault
from .rigid import HINGE, adjoint_integrate_rigid, hinge_reduce, integrate_rigid

STATE_KEYS = ("x", "v", "C", "F", "J")


@dataclass
class SimConfig:
    res: int = 64
    dt: float = 1e-4
    substeps: int = 10
    gravity: tuple = (0.0, -9.8)
    contact: ContactParams = None
    strict: bool = False

    def __post_init__(self):
        if self.res < 8:
            raise ConfigError("grid resolution must be at least 8", "sim.res")
        if not self.dt > 0:
            raise ConfigError("must be positive", "sim.dt")
        if self.substeps < 1:
            raise ConfigError("must be at least 1", "sim.substeps")
        if self.contact is None:
            self.contact = ContactParams.for_grid(self.res)

    @property
    def step_dt(self):
        return self.dt * self.substeps


@dataclass
class ClothObject:
    model: ClothModel
    tracing: bool = True
    depth: int = 2
    table: NeighborhoodTable = None

    def __post_init__(self):
        if self.table is None:
            self.table = build_neighborhoods(self.model.mesh, self.depth)


@dataclass
class ActionLayout:
    """Packs per-step actions into one flat vector.

    Order: 3 entries per rigid body, 2 per control vertex of each cloth, then
    2 per particle of the impulse selection.
    """

    n_bodies: int
    cloth_controls: list
    n_impulse: int

    @property
    def size(self):
        return 3 * self.n_bodies + 2 * sum(self.cloth_controls) + 2 * self.n_impulse

    def split(self, a):
        a = np.asarray(a, dtype=float)
        i = 3 * self.n_bodies
        bodies = a[:i].reshape(self.n_bodies, 3)
        cloths = []
        for nc in self.cloth_controls:
            cloths.append(a[i:i + 2 * nc].reshape(nc, 2))
            i += 2 * nc
        impulse = a[i:i + 2 * self.n_impulse].reshape(self.n_impulse, 2)
        return bodies, cloths, impulse

    def join(self, bodies, cloths, impulse):
        parts = [np.asarray(bodies, dtype=float).reshape(-1)]
        parts += [np.asarray(c, dtype=float).reshape(-1) for c in cloths]
        parts.append(np.asarray(impulse, dtype=float).reshape(-1))
        return np.concatenate(parts)


@dataclass
class CoupledState:
    particles: mpm.ParticleSet
    bodies: list
    cloths: list          # (X, V) per cloth
    pen: list             # PenetrationState per cloth
    time: float = 0.0

    def copy(self):
        return CoupledState(self.particles.copy(), [b.copy() for b in self.bodies],
                            [(X.copy(), V.copy()) for X, V in self.cloths],
                            [p.copy() for p in self.pen], self.time)


@dataclass
class System:
    config: SimConfig
    bodies: list = field(default_factory=list)        # RigidBody
    cloths: list = field(default_factory=list)        # ClothObject
    impulse_selection: np.ndarray = None

    def __post_init__(self):
        if self.impulse_selection is None:
            self.impulse_selection = np.zeros(0, dtype=np.int64)
        self.impulse_selection = np.asarray(self.impulse_selection, dtype=np.int64).reshape(-1)
        if self.cloths and self.config.contact.model == GRID:
            raise ConfigError("the grid contact model supports rigid bodies only", "contact.model")
        self.layout = ActionLayout(len(self.bodies), [len(c.model.control) for c in self.cloths],
                                   len(self.impulse_selection))

    @property
    def tracking_radius(self):
        return 2.0 * self.config.contact.d_hat

    def check_state(self, state: CoupledState):
        sel = self.impulse_selection
        if sel.size and (sel.min() < 0 or sel.max() >= state.particles.n):
            raise ConfigError("impulse selection index out of range", "control.impulse_selection")

    def zero_actions(self, steps):
        return np.zeros((steps, self.layout.size))


# ---------------------------------------------------------------------------
# one MPM substep


def _boundaries(system: System, state: CoupledState, t, trackers):
    out = []
    for i, (body, s) in enumerate(zip(system.bodies, state.bodies)):
        out.append(RigidBoundary(i, body.shape, s, t))
    for j, (obj, (X, V)) in enumerate(zip(system.cloths, state.cloths)):
        out.append(ClothBoundary(j, trackers[j], X, V, t))
    return out


def mpm_substep(system: System, particles: mpm.ParticleSet, boundaries, ext_momentum, faults: Counter, stats=None):
    """Advance ``particles`` in place; returns (ledgers, cache)."""
    cfg = system.config
    params = cfg.contact
    res, dt = cfg.res, cfg.dt
    x = particles.x
    for b in boundaries:
        if b.kind == "cloth":
            b.track(x)
    st = mpm.compute_stencil(x, res)
    S = mpm.compute_stress_momentum(particles, dt, res)
    F_in, J_in = particles.F, particles.J
    ext = ext_momentum
    ledgers = [b.ledger_zeros() for b in boundaries]
    pcache = ccache = None
    if boundaries and params.model == PARTICLE:
        pen, ledgers, pcache = particle_contact(x, boundaries, params, dt)
        ext = pen if ext is None else ext + pen
    grid = mpm.Grid(res)
    _, p2g_cache = mpm.p2g(particles, S, st, grid, ext)
    v_hat, active = mpm.grid_normalize(grid, cfg.gravity, dt, particles.mass.sum())
    v_g = v_hat
    if boundaries and params.model == FORECAST:
        v_g, ledgers, ccache = forecast_contact(v_hat, st, x, particles.mass, boundaries, params, dt,
                                                grid.n_nodes, faults)
        if stats is not None:
            before, after = ccache["objective"]
            if before > 0:
                stats.setdefault("objective_decrease", []).append(1.0 - after / before)
    elif boundaries and params.model == GRID:
        v_g, ledgers, ccache = grid_contact(v_hat, grid.node_positions(), grid.m, active, boundaries, params)
    v_g = v_g.copy()
    v_g[grid.wall_mask()] = 0.0
    grid.v = v_g
    _, gcache = mpm.g2p(grid, particles, st, dt, faults)
    cache = dict(x=x, st=st, F=F_in, J=J_in, grid=grid, active=active, p2g=p2g_cache, g2p=gcache,
                 pcache=pcache, ccache=ccache)
    return ledgers, cache


def mpm_substep_vjp(system: System, particles: mpm.ParticleSet, boundaries, cache, g_state, g_ledgers):
    """Reverse of :func:`mpm_substep`.

    ``particles`` supplies the per-particle constants.  Returns
    (gradient on the input particle state, gradient on the external momentum).
    Boundary gradients accumulate on the boundary objects.
    """
    cfg = system.config
    params = cfg.contact
    res, dt = cfg.res, cfg.dt
    st, grid, x = cache["st"], cache["grid"], cache["x"]
    nn = grid.n_nodes
    g_gv, g_x, g_F, g_J, g_w, g_dpos = mpm.g2p_vjp(particles, st, cache["g2p"], dt, res, g_state["x"],
                                                   g_state["v"], g_state["C"], g_state["F"], g_state["J"], nn)
    g_gv[grid.wall_mask()] = 0.0
    g_m_extra = None
    if cache["ccache"] is not None and params.model == FORECAST:
        g_vhat, g_xc, g_w2 = forecast_contact_vjp(cache["ccache"], st, x, particles.mass, boundaries, params,
                                                  dt, nn, g_gv, g_ledgers)
        g_x = g_x + g_xc
        g_w = g_w + g_w2
    elif cache["ccache"] is not None and params.model == GRID:
        g_vhat, g_m_extra = grid_contact_vjp(cache["ccache"], grid.m, boundaries, params, g_gv, g_ledgers)
    else:
        g_vhat = g_gv
    g_p, g_m = mpm.grid_normalize_vjp(grid, cache["active"], g_vhat)
    if g_m_extra is not None:
        g_m = g_m + g_m_extra
    g_mom, g_aff, g_w3, g_dpos3 = mpm.p2g_vjp(particles, st, cache["p2g"], g_p, g_m)
    if cache["pcache"] is not None:
        g_x = g_x + particle_contact_vjp(cache["pcache"], x, boundaries, params, dt, g_mom,
                                         g_ledgers)
    scale = mpm.stress_scale(particles, dt, res)
    g_Fs, g_Js = mpm.kirchhoff_stress_vjp(cache["F"], cache["J"], particles.material, particles.mu,
                                          particles.lam, scale[:, None, None] * g_aff)
    g_x = g_x + mpm.stencil_vjp(st, g_w + g_w3, g_dpos + g_dpos3)
    g_in = dict(x=g_x, v=particles.mass[:, None] * g_mom, C=particles.mass[:, None, None] * g_aff,
                F=g_F + g_Fs, J=g_J + g_Js)
    return g_in, g_mom


# ---------------------------------------------------------------------------
# coupled step, rollout and tape


@dataclass
class StepRecord:
    bodies: list
    cloths: list
    action: np.ndarray
    wrenches: list
    cloth_forces: list
    substeps: list = field(default_factory=list)   # (particle state, pen snapshots)


@dataclass
class Tape:
    initial: CoupledState
    steps: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)


def _trackers(system: System, state: CoupledState, faults: Counter):
    out = []
    for obj, pen in zip(system.cloths, state.pen):
        tr = ClothTracker(obj.model.mesh, obj.table, pen, system.tracking_radius, obj.tracing)
        tr.faults = faults
        out.append(tr)
    return out


def _impulse_momentum(system: System, n, impulse):
    if len(system.impulse_selection) == 0:
        return None
    ext = np.zeros((n, 2))
    np.add.at(ext, system.impulse_selection, impulse)
    return ext


def coupled_step(system: System, state: CoupledState, action, faults: Counter | None = None,
                 record: StepRecord | None = None, stats: dict | None = None):
    """Advance ``state`` in place by one manipulator step."""
    cfg = system.config
    faults = Counter() if faults is None else faults
    a_bodies, a_cloths, a_imp = system.layout.split(action)
    trackers = _trackers(system, state, faults)
    p = state.particles
    sums = [np.zeros(3) for _ in system.bodies] + [np.zeros_like(X) for X, _ in state.cloths]
    for k in range(cfg.substeps):
        if record is not None:
            record.substeps.append((p.state(), [tr.state.copy() for tr in trackers]))
        rep = mpm.cfl_check(p, mpm.Grid(cfg.res), cfg.dt, cfg.strict)
        if stats is not None:
            stats["cfl_max"] = max(stats.get("cfl_max", 0.0), rep.cfl)
        if not rep.ok:
            faults["cfl"] += 1
        bnds = _boundaries(system, state, k * cfg.dt, trackers)
        ext = _impulse_momentum(system, p.n, a_imp) if k == 0 else None
        ledgers, _ = mpm_substep(system, p, bnds, ext, faults, stats)
        for i, led in enumerate(ledgers):
            sums[i] = sums[i] + led
    state.pen = [tr.state for tr in trackers]
    T = cfg.step_dt
    nb = len(system.bodies)
    wrenches = [s / T for s in sums[:nb]]
    forces = [s / T for s in sums[nb:]]
    if record is not None:
        record.wrenches, record.cloth_forces = wrenches, forces
    state.bodies = [integrate_rigid(b, s, w, a, T, cfg.gravity)
                    for b, s, w, a in zip(system.bodies, state.bodies, wrenches, a_bodies)]
    state.cloths = [cloth_step(obj.model, X, V, f, c, T, cfg.gravity)
                    for obj, (X, V), f, c in zip(system.cloths, state.cloths, forces, a_cloths)]
    state.time += T
    if cfg.strict and faults:
        raise SimulationFault(f"faults in strict mode: {dict(faults)}")
    return state


@dataclass
class RolloutReport:
    faults: Counter
    cfl_max: float
    objective_decrease: list
    wall_time_s: float


def rollout(system: System, state: CoupledState, actions, tape: bool = True, on_step=None):
    """Run ``len(actions)`` coupled steps from a copy of ``state``.

    Returns (final state, tape or None, report).  ``on_step(n, state)`` is
    called after every step and once for the initial state with ``n = 0``.
    """
    t0 = time.perf_counter()
    system.check_state(state)
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 1:
        actions = actions.reshape(-1, system.layout.size)
    cur = state.copy()
    tp = Tape(state.copy()) if tape else None
    faults = Counter()
    stats = {}
    if on_step is not None:
        on_step(0, cur)
    for n, a in enumerate(actions):
        rec = None
        if tp is not None:
            rec = StepRecord([b.copy() for b in cur.bodies], [(X.copy(), V.copy()) for X, V in cur.cloths],
                             a.copy(), [], [])
        coupled_step(system, cur, a, faults, rec, stats)
        if tp is not None:
            tp.steps.append(rec)
        if on_step is not None:
            on_step(n + 1, cur)
    rep = RolloutReport(faults, stats.get("cfl_max", 0.0), stats.get("objective_decrease", []),
                        time.perf_counter() - t0)
    return cur, tp, rep


# ---------------------------------------------------------------------------
# reverse pass


@dataclass
class StateGrad:
    particles: dict
    bodies: list
    cloths: list

    @classmethod
    def zeros(cls, state: CoupledState):
        p = state.particles
        return cls({k: np.zeros_like(getattr(p, k)) for k in STATE_KEYS},
                   [np.zeros(6) for _ in state.bodies],
                   [(np.zeros_like(X), np.zeros_like(V)) for X, V in state.cloths])

    def add(self, other: "StateGrad"):
        for k in STATE_KEYS:
            self.particles[k] = self.particles[k] + other.particles[k]
        self.bodies = [a + b for a, b in zip(self.bodies, other.bodies)]
        self.cloths = [(a[0] + b[0], a[1] + b[1]) for a, b in zip(self.cloths, other.cloths)]
        return self


def backward(system: System, tape: Tape, g_final: StateGrad, step_grads: dict | None = None):
    """Gradients of a loss w.r.t. every step's action and the initial state.

    ``g_final`` is dL/d(final state); ``step_grads`` optionally maps a step
    index ``n`` (state after ``n`` steps, ``0`` = initial) to extra gradients.
    Returns (g_actions of shape (T, action size), StateGrad of the initial state).
    """
    cfg = system.config
    T_steps = len(tape)
    step_grads = step_grads or {}
    g = g_final
    if T_steps in step_grads:
        g = g.add(step_grads[T_steps])
    g_actions = np.zeros((T_steps, system.layout.size))
    consts = tape.initial.particles
    Tdt = cfg.step_dt
    nb = len(system.bodies)
    for n in reversed(range(T_steps)):
        rec = tape.steps[n]
        a_bodies, a_cloths, _ = system.layout.split(rec.action)
        gb_in, g_wr, g_ab = [], [], []
        for body, s, w, a, gs in zip(system.bodies, rec.bodies, rec.wrenches, a_bodies, g.bodies):
            gi, gw, ga = adjoint_integrate_rigid(body, s, w, a, Tdt, gs, cfg.gravity)
            gb_in.append(gi)
            g_wr.append(gw)
            g_ab.append(ga)
        gc_in, g_cf, g_ac = [], [], []
        for obj, (X, V), f, c, (gX, gV) in zip(system.cloths, rec.cloths, rec.cloth_forces, a_cloths, g.cloths):
            gXi, gVi, gf, gc = adjoint_cloth_step(obj.model, X, V, f, c, Tdt, gX, gV, cfg.gravity)
            gc_in.append([gXi, gVi])
            g_cf.append(gf)
            g_ac.append(gc)
        g_led = [gw / Tdt for gw in g_wr] + [gf / Tdt for gf in g_cf]
        g_p = {k: g.particles[k] for k in STATE_KEYS}
        g_imp = np.zeros((len(system.impulse_selection), 2))
        view = CoupledState(None, rec.bodies, rec.cloths, [])
        for k in reversed(range(cfg.substeps)):
            pstate, pens = rec.substeps[k]
            p = consts.copy()
            p.pending_impulse = None
            p.load_state(pstate)
            trackers = [ClothTracker(obj.model.mesh, obj.table, pen.copy(), system.tracking_radius, obj.tracing)
                        for obj, pen in zip(system.cloths, pens)]
            bnds = _boundaries(system, view, k * cfg.dt, trackers)
            ext = _impulse_momentum(system, p.n, system.layout.split(rec.action)[2]) if k == 0 else None
            _, cache = mpm_substep(system, p, bnds, ext, Counter())
            g_p, g_ext = mpm_substep_vjp(system, consts, bnds, cache, g_p, g_led)
            if k == 0 and len(system.impulse_selection):
                g_imp = g_ext[system.impulse_selection]
            for b in bnds[:nb]:
                gb_in[b.index] = gb_in[b.index] + b.grad
            for b in bnds[nb:]:
                gc_in[b.index][0] = gc_in[b.index][0] + b.grad_X
                gc_in[b.index][1] = gc_in[b.index][1] + b.grad_V
        g_actions[n] = system.layout.join(g_ab, g_ac, g_imp)
        g = StateGrad(g_p, gb_in, [tuple(c) for c in gc_in])
        if n in step_grads:
            g = g.add(step_grads[n])
    for i, body in enumerate(system.bodies):
        if body.mode == HINGE:
            g.bodies[i] = hinge_reduce(body, tape.initial.bodies[i], g.bodies[i])
    return g_actions, g
