"""Contact between MPM and boundary objects: grid, particle and forecast models.

A *boundary* is anything that can answer signed-distance queries at world
points and absorb reaction impulses: :class:`RigidBoundary` here and
``ClothBoundary`` in :mod:`mpmcouple.cloth_contact`.  Each boundary also
implements the vector-Jacobian products of its queries so the reverse pass
can route gradients into the boundary's state.

Every function here works on batches; the public single-contact helpers
(``bc_friction``, ``smooth_blend`` ...) accept single vectors too.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import mpm
from .errors import ConfigError
from .sdf import Shape, sdf_query_full, sdf_query_vjp

GRID, PARTICLE, FORECAST = "grid", "particle", "forecast"
MODELS = (GRID, PARTICLE, FORECAST)
LEGAL_ITERATIONS = 3


@dataclass
class ContactParams:
    model: str = FORECAST
    d_hat: float = 1.0 / 64
    mu: float = 0.5
    beta: float = 3.0 * 64
    alpha: float = 0.2
    k: float = 400.0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown contact model {self.model!r}", "contact.model")
        if not self.d_hat > 0:
            raise ConfigError("must be positive", "contact.d_hat")
        if self.mu < 0:
            raise ConfigError("must be non-negative", "contact.mu")
        if not self.beta > 0:
            raise ConfigError("must be positive", "contact.beta")
        if not 0 < self.alpha <= 1:
            raise ConfigError("must be in (0, 1]", "contact.alpha")
        if not self.k > 0:
            raise ConfigError("must be positive", "contact.k")

    @classmethod
    def for_grid(cls, res, **kw):
        dx = 1.0 / res
        kw.setdefault("d_hat", dx)
        kw.setdefault("beta", 3.0 / dx)
        return cls(**kw)


def _perp(r):
    return np.stack([-r[..., 1], r[..., 0]], axis=-1)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


# ---------------------------------------------------------------------------
# velocity-level building blocks


def _friction_fwd(v_in, v_c, n, mu):
    v_rel = v_in - v_c
    sn = np.einsum("pc,pc->p", v_rel, n)
    v_t = v_rel - sn[:, None] * n
    nt = np.sqrt(np.einsum("pc,pc->p", v_t, v_t))
    approach = sn < 0.0
    has_t = nt > 0.0
    f = np.where(has_t, 1.0 + mu * sn / np.where(has_t, nt, 1.0), 0.0)
    slide = approach & has_t & (f > 0.0)
    arrest = approach & ~slide
    out = np.where(slide[:, None], f[:, None] * v_t + v_c, v_in)
    out = np.where(arrest[:, None], v_c, out)
    return out, (v_rel, sn, v_t, nt, f, slide, arrest)


def _friction_vjp(cache, n, mu, g_out):
    v_rel, sn, v_t, nt, f, slide, arrest = cache
    sep = ~(slide | arrest)
    g_vin = np.where(sep[:, None], g_out, 0.0)
    g_vc = np.where((slide | arrest)[:, None], g_out, 0.0)
    g_n = np.zeros_like(g_out)
    if np.any(slide):
        s = slide
        go, vt, nn = g_out[s], v_t[s], n[s]
        nts, sns, fs = nt[s], sn[s], f[s]
        g_f = np.einsum("pc,pc->p", go, vt)
        g_vt = fs[:, None] * go
        g_sn = g_f * mu / nts
        g_nt = -g_f * mu * sns / nts**2
        g_vt = g_vt + (g_nt / nts)[:, None] * vt
        g_vrel = g_vt.copy()
        g_sn = g_sn - np.einsum("pc,pc->p", g_vt, nn)
        gn = -sns[:, None] * g_vt
        g_vrel += g_sn[:, None] * nn
        gn += g_sn[:, None] * v_rel[s]
        g_vin[s] += g_vrel
        g_vc[s] -= g_vrel
        g_n[s] = gn
    return g_vin, g_vc, g_n


def bc_friction(v_in, v_c, n, mu):
    """Drop the approaching normal velocity and decay the tangent by friction."""
    single = np.ndim(v_in) == 1
    v_in, v_c, n = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (v_in, v_c, n))
    v_c = np.broadcast_to(v_c, v_in.shape)
    n = np.broadcast_to(n, v_in.shape)
    out, _ = _friction_fwd(v_in, v_c, n, mu)
    return out[0] if single else out


def _blend_factor(d, beta):
    return np.minimum(np.exp(-beta * np.maximum(d, 0.0)), 1.0)


def smooth_blend(v_out, v_in, d, beta):
    """s * v_out + (1 - s) * v_in with s = min(exp(-beta d), 1)."""
    s = _blend_factor(np.asarray(d, dtype=float), beta)
    s = np.asarray(s)[..., None] if np.ndim(v_out) > np.ndim(s) else s
    return s * np.asarray(v_out) + (1.0 - s) * np.asarray(v_in)


def body_contact_velocity(twist, com, point):
    """Rigid velocity v + w x r at ``point`` for planar twist (vx, vy, w)."""
    twist = np.asarray(twist, dtype=float)
    r = np.asarray(point, dtype=float) - np.asarray(com, dtype=float)
    return twist[:2] + twist[2] * _perp(r)


def legal_position_correction(x_p, v_out, dt, trial, faults: Counter | None = None):
    """Push the advected trial point back to the zero level set.

    ``trial(x)`` returns ``(d, n)`` at world points.  Returns the corrected
    velocity; points still inside after the iteration cap are counted in
    ``faults['legal_projection']``.
    """
    single = np.ndim(x_p) == 1
    x_p = np.atleast_2d(np.asarray(x_p, dtype=float))
    v = np.atleast_2d(np.asarray(v_out, dtype=float)).copy()
    for _ in range(LEGAL_ITERATIONS):
        d, n = trial(x_p + v * dt)
        bad = d < 0
        if not np.any(bad):
            break
        v[bad] -= d[bad, None] * n[bad] / dt
    else:
        d, _ = trial(x_p + v * dt)
        if faults is not None:
            faults["legal_projection"] += int((d < 0).sum())
    return v[0] if single else v


# ---------------------------------------------------------------------------
# boundaries


@dataclass
class Query:
    d: np.ndarray
    n: np.ndarray
    vc: np.ndarray
    aux: dict


class RigidBoundary:
    """A rigid body seen by MPM during one substep.

    The pose is extrapolated from the body's step-start state by the substep
    time offset ``t`` so the boundary moves smoothly between coupled steps.
    ``grad`` accumulates dL/d(step-start state) as ``(x, y, theta, vx, vy, w)``.
    """

    kind = "rigid"

    def __init__(self, index, shape: Shape, state, t=0.0):
        self.index = index
        self.shape = shape
        self.state = np.asarray(state, dtype=float)
        self.t = float(t)
        self.pose = self.state[:3] + self.t * self.state[3:6]
        self.twist = self.state[3:6]
        self.grad = np.zeros(6)

    def ledger_zeros(self):
        return np.zeros(3)

    def _pose_grad(self, g_pose):
        self.grad[:3] += g_pose
        self.grad[3:6] += self.t * g_pose

    def query(self, x):
        d, n, cache = sdf_query_full(self.shape, x, self.pose)
        c = x - d[:, None] * n
        vc = self.twist[:2] + self.twist[2] * _perp(c - self.pose[:2])
        return Query(d, n, vc, {"cache": cache, "c": c, "x": x})

    def query_vjp(self, q: Query, g_d, g_n, g_vc, g_c=None):
        x, c = q.aux["x"], q.aux["c"]
        g_pose = np.zeros(3)
        g_c = np.zeros_like(x) if g_c is None else g_c.copy()
        if g_vc is not None:
            self.grad[3:5] += g_vc.sum(axis=0)
            self.grad[5] += np.einsum("pc,pc->", g_vc, _perp(c - self.pose[:2]))
            # perp(r) = P r with P = [[0,-1],[1,0]]; P^T g = (g_y, -g_x)
            gr = self.twist[2] * np.stack([g_vc[:, 1], -g_vc[:, 0]], axis=1)
            g_c += gr
            g_pose[:2] -= gr.sum(axis=0)
        g_x = g_c.copy()
        g_d = g_d - np.einsum("pc,pc->p", g_c, q.n)
        g_n = g_n - q.d[:, None] * g_c
        gx2, gp2 = sdf_query_vjp(self.shape, x, self.pose, q.aux["cache"], g_d, g_n)
        self._pose_grad(g_pose + gp2)
        return g_x + gx2

    def trial(self, xt, q: Query, sel):
        d, n, cache = sdf_query_full(self.shape, xt, self.pose)
        return d, n, (xt, cache)

    def trial_vjp(self, q: Query, sel, tcache, g_dt, g_nt):
        """Returns (g_xt, g_x_base, g_d_base, g_n_base) for the selected rows."""
        xt, cache = tcache
        g_xt, g_pose = sdf_query_vjp(self.shape, xt, self.pose, cache, g_dt, g_nt)
        self._pose_grad(g_pose)
        return g_xt, None, None, None

    def accumulate(self, R, q: Query, sel):
        """Reaction impulses R (on the body) applied at the contact points."""
        c = q.aux["c"][sel]
        lin = R.sum(axis=0)
        ang = _cross(c - self.pose[:2], R).sum()
        return np.array([lin[0], lin[1], ang])

    def accumulate_vjp(self, R, q: Query, sel, g_ledger):
        """Returns (g_R, g_c) for the selected rows and records the pose part."""
        c = q.aux["c"][sel]
        r = c - self.pose[:2]
        gt = g_ledger[2]
        g_R = g_ledger[:2][None, :] + gt * np.stack([-r[:, 1], r[:, 0]], axis=1)
        g_r = gt * np.stack([R[:, 1], -R[:, 0]], axis=1)
        g_pose = np.zeros(3)
        g_pose[:2] = -g_r.sum(axis=0)
        self._pose_grad(g_pose)
        return g_R, g_r


# ---------------------------------------------------------------------------
# particle-level boundary condition used by the forecast model


def _take(q: Query, sel):
    return q.d[sel], q.n[sel], q.vc[sel]


def particle_bc_stage(v, x, mass, q: Query, boundary, params: ContactParams, dt, faults=None):
    """Apply friction, blending and legal-position correction for one boundary.

    Returns the new particle velocities and a cache for :func:`particle_bc_stage_vjp`.
    """
    sel = np.nonzero(q.d < params.d_hat)[0]
    v_new = v.copy()
    cache = {"sel": sel}
    if len(sel) == 0:
        cache["ledger"] = boundary.ledger_zeros()
        return v_new, cache
    d, n, vc = _take(q, sel)
    v0 = v[sel]
    v_out, fc = _friction_fwd(v0, vc, n, params.mu)
    s = _blend_factor(d, params.beta)
    v1 = s[:, None] * v_out + (1 - s[:, None]) * v0
    xs = x[sel]
    iters = []
    cur = v1.copy()
    for _ in range(LEGAL_ITERATIONS):
        xt = xs + cur * dt
        dt_, nt_, tc = boundary.trial(xt, q, sel)
        bad = dt_ < 0
        iters.append((bad, dt_, nt_, tc))
        if not np.any(bad):
            break
        cur = cur - np.where(bad, dt_, 0.0)[:, None] * nt_ / dt
    else:
        dt_, _, _ = boundary.trial(xs + cur * dt, q, sel)
        if faults is not None:
            faults["legal_projection"] += int((dt_ < 0).sum())
    v_new[sel] = cur
    R = -mass[sel, None] * (cur - v0)
    cache.update(v0=v0, v_out=v_out, fc=fc, s=s, iters=iters, R=R)
    cache["ledger"] = boundary.accumulate(R, q, sel)
    return v_new, cache


def particle_bc_stage_vjp(cache, x, mass, q: Query, boundary, params: ContactParams, dt, g_vnew, g_ledger,
                          g_d_q, g_n_q, g_vc_q, g_c_q):
    """Reverse of :func:`particle_bc_stage`.

    Returns (g_v, g_x).  Query gradients are accumulated into the ``g_*_q``
    arrays so they can be pulled back through the query once per boundary.
    """
    sel = cache["sel"]
    g_v = g_vnew.copy()
    g_x = np.zeros_like(x)
    if len(sel) == 0:
        return g_v, g_x
    d, n, vc = _take(q, sel)
    v0, v_out, s = cache["v0"], cache["v_out"], cache["s"]
    R = cache["R"]
    g_R, g_r = boundary.accumulate_vjp(R, q, sel, g_ledger)
    if g_r is not None:
        g_c_q[sel] += g_r
    # R = -m (cur - v0)
    g_cur = g_vnew[sel] - mass[sel, None] * g_R
    g_v0 = mass[sel, None] * g_R
    xs = x[sel]
    g_xs = np.zeros_like(xs)
    g_d = np.zeros(len(sel))
    g_n = np.zeros((len(sel), 2))
    for bad, dt_, nt_, tc in reversed(cache["iters"]):
        if not np.any(bad):
            continue
        # cur_next = cur - [bad] dt_ nt_ / dt ; xt = xs + cur dt
        g_dt = np.where(bad, -np.einsum("pc,pc->p", g_cur, nt_) / dt, 0.0)
        g_nt = np.where(bad[:, None], -dt_[:, None] * g_cur / dt, 0.0)
        g_xt, gxb, gdb, gnb = boundary.trial_vjp(q, sel, tc, g_dt, g_nt)
        if gxb is not None:
            g_xs += gxb
            g_d += gdb
            g_n += gnb
        g_xs += g_xt
        g_cur = g_cur + dt * g_xt
    # v1 = s v_out + (1 - s) v0
    g_vout = s[:, None] * g_cur
    g_v0 += (1 - s[:, None]) * g_cur
    g_s = np.einsum("pc,pc->p", g_cur, v_out - v0)
    g_d += np.where(d > 0, -params.beta * s * g_s, 0.0)
    gvin, gvc, gn = _friction_vjp(cache["fc"], n, params.mu, g_vout)
    g_v0 += gvin
    g_n += gn
    g_v[sel] = g_v0
    g_x[sel] = g_xs
    g_d_q[sel] += g_d
    g_n_q[sel] += g_n
    g_vc_q[sel] += gvc
    return g_v, g_x


def _query_all(boundaries, x):
    return [b.query(x) for b in boundaries]


def _zeros_like_query(n):
    return np.zeros(n), np.zeros((n, 2)), np.zeros((n, 2)), np.zeros((n, 2))


# ---------------------------------------------------------------------------
# forecast model


def forecast_contact(v_hat, stencil, x, mass, boundaries, params: ContactParams, dt, n_nodes, faults=None):
    """Look-ahead G2P, particle-level BC, then one gradient step on the grid.

    Returns (v_g, ledgers, cache).  ``cache['objective']`` holds the transfer
    mismatch before and after the grid update.
    """
    v_init = mpm.gather(stencil, v_hat)
    queries = _query_all(boundaries, x)
    v = v_init
    stages = []
    ledgers = []
    for b, q in zip(boundaries, queries):
        v, c = particle_bc_stage(v, x, mass, q, b, params, dt, faults)
        stages.append(c)
        ledgers.append(c["ledger"])
    v_tgt = v
    r = v_init - v_tgt
    v_g = v_hat - params.alpha * mpm.scatter(stencil.idx, stencil.w[:, :, None] * r[:, None, :], n_nodes)
    before = float((r * r).sum())
    resid = mpm.gather(stencil, v_g) - v_tgt
    after = float((resid * resid).sum())
    cache = dict(v_hat=v_hat, v_init=v_init, v_tgt=v_tgt, r=r, queries=queries, stages=stages,
                 objective=(before, after))
    return v_g, ledgers, cache


def forecast_contact_vjp(cache, stencil, x, mass, boundaries, params: ContactParams, dt, n_nodes,
                         g_vg, g_ledgers):
    """Returns (g_v_hat, g_x, g_w)."""
    r = cache["r"]
    g_vhat = g_vg.copy()
    # v_g = v_hat - alpha W r
    g_r_p = -params.alpha * mpm.gather(stencil, g_vg)
    g_w = -params.alpha * (g_vg[stencil.idx] @ r[:, :, None])[:, :, 0]
    g_vinit = g_r_p.copy()
    g_v = -g_r_p
    g_x = np.zeros_like(x)
    for b, q, c, gl in reversed(list(zip(boundaries, cache["queries"], cache["stages"], g_ledgers))):
        gq = _zeros_like_query(len(x))
        g_v, gx = particle_bc_stage_vjp(c, x, mass, q, b, params, dt, g_v, gl, *gq)
        g_x += gx
        g_x += b.query_vjp(q, gq[0], gq[1], gq[2], gq[3])
    g_vinit += g_v
    g_nodes, g_w2 = mpm.gather_vjp(stencil, cache["v_hat"], g_vinit, n_nodes)
    g_vhat += g_nodes
    return g_vhat, g_x, g_w + g_w2


# ---------------------------------------------------------------------------
# grid model


def grid_contact(v_hat, node_x, node_m, active, boundaries, params: ContactParams):
    """Per-node friction + blending for nodes within ``d_hat`` of a boundary.

    Returns (v_g, ledgers, cache); each ledger is the reaction impulse on the
    boundary, equal to minus the momentum change of the modified nodes.
    """
    ids = np.nonzero(active)[0]
    X = node_x[ids]
    m = node_m[ids]
    v = v_hat[ids]
    stages = []
    ledgers = []
    for b in boundaries:
        if getattr(b, "kind", "") != "rigid":
            raise ConfigError("the grid contact model supports rigid bodies only", "contact.model")
        q = b.query(X)
        sel = np.nonzero(q.d < params.d_hat)[0]
        if len(sel) == 0:
            stages.append((q, sel, None))
            ledgers.append(b.ledger_zeros())
            continue
        d, n, vc = _take(q, sel)
        v0 = v[sel]
        v_out, fc = _friction_fwd(v0, vc, n, params.mu)
        s = _blend_factor(d, params.beta)
        v1 = s[:, None] * v_out + (1 - s[:, None]) * v0
        R = -m[sel, None] * (v1 - v0)
        ledgers.append(b.accumulate(R, q, sel))
        stages.append((q, sel, dict(v0=v0, v_out=v_out, fc=fc, s=s, R=R)))
        v = v.copy()
        v[sel] = v1
    v_g = v_hat.copy()
    v_g[ids] = v
    return v_g, ledgers, dict(ids=ids, stages=stages)


def grid_contact_vjp(cache, node_m, boundaries, params: ContactParams, g_vg, g_ledgers):
    """Returns (g_v_hat, g_node_m)."""
    ids = cache["ids"]
    g_vhat = g_vg.copy()
    g_v = g_vg[ids].copy()
    g_m = np.zeros(len(node_m))
    gm_loc = np.zeros(len(ids))
    for b, (q, sel, c), gl in reversed(list(zip(boundaries, cache["stages"], g_ledgers))):
        if c is None:
            continue
        d, n, vc = _take(q, sel)
        v0, v_out, s, R = c["v0"], c["v_out"], c["s"], c["R"]
        g_R, g_r = b.accumulate_vjp(R, q, sel, gl)
        m = node_m[ids][sel]
        v1 = s[:, None] * v_out + (1 - s[:, None]) * v0
        gm_loc[sel] += -np.einsum("pc,pc->p", g_R, v1 - v0)
        g_v1 = g_v[sel] - m[:, None] * g_R
        g_v0 = m[:, None] * g_R + (1 - s[:, None]) * g_v1
        g_vout = s[:, None] * g_v1
        g_s = np.einsum("pc,pc->p", g_v1, v_out - v0)
        g_d = np.where(d > 0, -params.beta * s * g_s, 0.0)
        gvin, gvc, gn = _friction_vjp(c["fc"], n, params.mu, g_vout)
        g_v0 += gvin
        g_v[sel] = g_v0
        nq = len(q.d)
        gd_q, gn_q, gvc_q, gc_q = _zeros_like_query(nq)
        gd_q[sel] = g_d
        gn_q[sel] = gn
        gvc_q[sel] = gvc
        if g_r is not None:
            gc_q[sel] = g_r
        b.query_vjp(q, gd_q, gn_q, gvc_q, gc_q)  # node positions are fixed
    g_vhat[ids] = g_v
    g_m[ids] = gm_loc
    return g_vhat, g_m


# ---------------------------------------------------------------------------
# particle (penalty) model


def particle_contact(x, boundaries, params: ContactParams, dt):
    """Penalty momentum -k d n dt for penetrating particles (force F = -k d).

    Returns (momentum (N, 2), ledgers, cache); each ledger is the
    equal-and-opposite impulse on the boundary.
    """
    pen = np.zeros_like(x)
    ledgers = []
    stages = []
    for b in boundaries:
        q = b.query(x)
        sel = np.nonzero(q.d < 0.0)[0]
        if len(sel) == 0:
            stages.append((q, sel, None))
            ledgers.append(b.ledger_zeros())
            continue
        d, n, _ = _take(q, sel)
        P = -params.k * (d * dt)[:, None] * n
        pen[sel] += P
        ledgers.append(b.accumulate(-P, q, sel))
        stages.append((q, sel, P))
    return pen, ledgers, dict(stages=stages)


def particle_contact_vjp(cache, x, boundaries, params: ContactParams, dt, g_pen, g_ledgers):
    g_x = np.zeros_like(x)
    for b, (q, sel, P), gl in zip(boundaries, cache["stages"], g_ledgers):
        if P is None:
            continue
        d, n, _ = _take(q, sel)
        g_R, g_r = b.accumulate_vjp(-P, q, sel, gl)
        g_P = g_pen[sel] - g_R
        coef = -params.k * dt
        gd_q, gn_q, gvc_q, gc_q = _zeros_like_query(len(x))
        gd_q[sel] = coef * np.einsum("pc,pc->p", g_P, n)
        gn_q[sel] = (coef * d)[:, None] * g_P
        if g_r is not None:
            gc_q[sel] = g_r
        g_x += b.query_vjp(q, gd_q, gn_q, None, gc_q)
    return g_x
