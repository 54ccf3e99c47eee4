"""Signed distance to thin, non-volumetric meshes by penetration tracing.

In 2D a cloth is a polyline (chain or loop) whose faces are segments.
Distance comes from a nearest-face search accelerated by a spatial hash; the
sign comes from a per-particle binary state ``z`` that flips when a side
test, made consistent over a precomputed BFS neighbourhood, reports that the
particle moved to the other side of the mesh.
"""
from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .contact import Query
from .errors import ConfigError

NO_FACE = -1


def _perp(r):
    return np.stack([-r[..., 1], r[..., 0]], axis=-1)


@dataclass
class ClothMesh:
    """Polyline mesh with per-vertex state."""

    verts: np.ndarray
    faces: np.ndarray
    vel: np.ndarray = None
    mass: np.ndarray = None

    def __post_init__(self):
        self.verts = np.asarray(self.verts, dtype=float).reshape(-1, 2)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 2)
        if self.vel is None:
            self.vel = np.zeros_like(self.verts)
        self.vel = np.asarray(self.vel, dtype=float).reshape(-1, 2)
        nv = len(self.verts)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise ConfigError("face index out of range", "cloths.faces")
        if np.any(self.faces[:, 0] == self.faces[:, 1]):
            raise ConfigError("degenerate face", "cloths.faces")
        deg = np.bincount(self.faces.ravel(), minlength=nv)
        if np.any(deg > 2):
            raise ConfigError(f"vertex {int(np.argmax(deg > 2))} is shared by more than two faces",
                              "cloths.faces")
        self.degree = deg
        e = self.verts[self.faces[:, 1]] - self.verts[self.faces[:, 0]]
        self.rest_lengths = np.sqrt((e ** 2).sum(axis=1))
        if np.any(self.rest_lengths <= 0):
            raise ConfigError("zero-length face", "cloths.faces")
        if self.mass is None:
            self.mass = np.ones(nv)

    @property
    def n_faces(self):
        return len(self.faces)

    def max_face_extent(self, verts=None):
        verts = self.verts if verts is None else verts
        e = verts[self.faces[:, 1]] - verts[self.faces[:, 0]]
        return float(np.abs(e).max())

    @classmethod
    def strip(cls, a, b, segments, closed=False):
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        s = np.linspace(0.0, 1.0, segments + 1)[:, None]
        verts = a + s * (b - a)
        faces = np.stack([np.arange(segments), np.arange(1, segments + 1)], axis=1)
        return cls(verts, faces)

    @classmethod
    def loop(cls, center, radius, segments):
        ang = 2 * np.pi * np.arange(segments) / segments
        verts = np.asarray(center) + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        faces = np.stack([np.arange(segments), (np.arange(segments) + 1) % segments], axis=1)
        return cls(verts, faces)


def load_obj(path) -> ClothMesh:
    """Read ``v``, ``l`` and ``f`` records; polygon faces are split into their edges."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(parts[1]), float(parts[2])])
            elif tag in ("l", "f"):
                ids = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                if tag == "l":
                    faces += [(ids[i], ids[i + 1]) for i in range(len(ids) - 1)]
                else:
                    faces += [(ids[i], ids[(i + 1) % len(ids)]) for i in range(len(ids))]
            else:
                raise ConfigError(f"unsupported OBJ record {tag!r}", str(path))
    return ClothMesh(np.array(verts), np.array(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# neighbourhoods


def _relative_orientation(f, g):
    """+1 when traversal directions agree across the shared vertex, -1 otherwise."""
    if f[1] == g[0] or f[0] == g[1]:
        return 1
    if f[0] == g[0] or f[1] == g[1]:
        return -1
    return 0


@dataclass
class NeighborhoodTable:
    members: list
    orientation: list          # per seed: dict face -> +-1
    member_mask: np.ndarray    # (E, E) bool
    orient: np.ndarray         # (E, E) int8, 0 outside neighbourhood


def face_adjacency(faces):
    by_vert = {}
    for fi, (a, b) in enumerate(faces):
        by_vert.setdefault(int(a), []).append(fi)
        by_vert.setdefault(int(b), []).append(fi)
    adj = [[] for _ in range(len(faces))]
    for fs in by_vert.values():
        for f in fs:
            adj[f] += [g for g in fs if g != f]
    return [sorted(set(a)) for a in adj]


def build_neighborhoods(mesh: ClothMesh, depth: int = 2) -> NeighborhoodTable:
    faces = mesh.faces
    E = len(faces)
    adj = face_adjacency(faces)
    members, orientation = [], []
    mask = np.zeros((E, E), dtype=bool)
    orient = np.zeros((E, E), dtype=np.int8)
    for seed in range(E):
        sign = {seed: 1}
        order = [seed]
        queue = deque([(seed, 0)])
        while queue:
            f, lvl = queue.popleft()
            if lvl == depth:
                continue
            for g in adj[f]:
                s = sign[f] * _relative_orientation(faces[f], faces[g])
                if g in sign:
                    if sign[g] != s:
                        raise ConfigError(f"non-orientable neighbourhood around faces {f} and {g}",
                                          "cloths.faces")
                    continue
                sign[g] = s
                order.append(g)
                queue.append((g, lvl + 1))
        members.append(order)
        orientation.append(sign)
        for g, s in sign.items():
            mask[seed, g] = True
            orient[seed, g] = s
    return NeighborhoodTable(members, orientation, mask, orient)


# ---------------------------------------------------------------------------
# distance queries


def point_segment(points, a, b):
    """Clamped parameter, closest point and distance for aligned rows."""
    e = b - a
    ee = np.einsum("...c,...c->...", e, e)
    t = np.clip(np.einsum("...c,...c->...", points - a, e) / ee, 0.0, 1.0)
    c = a + t[..., None] * e
    d = np.sqrt(np.einsum("...c,...c->...", points - c, points - c))
    return t, c, d


def brute_force_nearest(points, verts, faces):
    """Reference nearest-face search over all faces (ties -> lowest id)."""
    a = verts[faces[:, 0]][None]
    b = verts[faces[:, 1]][None]
    t, _, d = point_segment(points[:, None, :], a, b)
    j = np.argmin(d, axis=1)
    r = np.arange(len(points))
    return j, t[r, j], d[r, j]


class SpatialHash:
    """Uniform-cell hash of face bounding boxes."""

    def __init__(self, verts, faces, cell_size, pad=0.0):
        self.cell = float(cell_size)
        self.verts = np.asarray(verts, dtype=float)
        self.faces = np.asarray(faces, dtype=np.int64)
        a = self.verts[self.faces[:, 0]]
        b = self.verts[self.faces[:, 1]]
        lo = np.floor((np.minimum(a, b) - pad) / self.cell).astype(np.int64)
        hi = np.floor((np.maximum(a, b) + pad) / self.cell).astype(np.int64)
        buckets = {}
        for f in range(len(self.faces)):
            for i in range(lo[f, 0], hi[f, 0] + 1):
                for j in range(lo[f, 1], hi[f, 1] + 1):
                    buckets.setdefault((i, j), []).append(f)
        self.buckets = {k: np.array(v, dtype=np.int64) for k, v in buckets.items()}
        keys = np.array(list(self.buckets.keys())) if buckets else np.zeros((0, 2), dtype=np.int64)
        self.cell_lo = keys.min(axis=0) if len(keys) else np.zeros(2, dtype=np.int64)
        self.cell_hi = keys.max(axis=0) if len(keys) else np.zeros(2, dtype=np.int64)

    def _ring(self, c, r):
        if r == 0:
            cells = [(c[0], c[1])]
        else:
            cells = [(c[0] + i, c[1] + j) for i in range(-r, r + 1) for j in (-r, r)]
            cells += [(c[0] + i, c[1] + j) for i in (-r, r) for j in range(-r + 1, r)]
        found = [self.buckets[k] for k in cells if k in self.buckets]
        return np.unique(np.concatenate(found)) if found else np.zeros(0, dtype=np.int64)

    def nearest(self, points, max_radius=np.inf):
        """Nearest face per point: (face, t, distance); NO_FACE / inf past ``max_radius``."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(points)
        best_f = np.full(n, NO_FACE, dtype=np.int64)
        best_t = np.zeros(n)
        best_d = np.full(n, np.inf)
        if not self.buckets or n == 0:
            return best_f, best_t, best_d
        cells = np.floor(points / self.cell).astype(np.int64)
        uniq, inv = np.unique(cells, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        order = np.argsort(inv, kind="stable")
        bounds = np.searchsorted(inv[order], np.arange(len(uniq) + 1))
        for g, c in enumerate(uniq):
            rows = order[bounds[g]:bounds[g + 1]]
            P = points[rows]
            bf = np.full(len(rows), NO_FACE, dtype=np.int64)
            bt = np.zeros(len(rows))
            bd = np.full(len(rows), np.inf)
            cmax = max(np.abs(c - self.cell_lo).max(), np.abs(c - self.cell_hi).max())
            r = 0
            while True:
                cand = self._ring(c, r)
                if len(cand):
                    t, _, d = point_segment(P[:, None, :], self.verts[self.faces[cand, 0]][None],
                                            self.verts[self.faces[cand, 1]][None])
                    o = np.argsort(cand, kind="stable")
                    cand, t, d = cand[o], t[:, o], d[:, o]
                    k = np.argmin(d, axis=1)
                    ar = np.arange(len(rows))
                    dk, fk, tk = d[ar, k], cand[k], t[ar, k]
                    better = (dk < bd) | ((dk == bd) & (fk < bf))
                    bd = np.where(better, dk, bd)
                    bf = np.where(better, fk, bf)
                    bt = np.where(better, tk, bt)
                reach = r * self.cell
                if np.all(bd < reach) or reach > max_radius or r > cmax:
                    break
                r += 1
            keep = bd <= max_radius
            best_f[rows] = np.where(keep, bf, NO_FACE)
            best_t[rows] = np.where(keep, bt, 0.0)
            best_d[rows] = np.where(keep, bd, np.inf)
        return best_f, best_t, best_d


def nearest_face(particle_x, verts, faces, hash_: SpatialHash | None = None, max_radius=np.inf):
    """Nearest face, barycentric coords and unsigned distance for each particle."""
    verts = np.asarray(verts, dtype=float)
    if hash_ is None:
        hash_ = SpatialHash(verts, faces, 2.0 * _max_extent(verts, faces))
    f, t, d = hash_.nearest(particle_x, max_radius)
    bary = np.stack([1.0 - t, t], axis=1)
    return f, bary, d


def _max_extent(verts, faces):
    e = verts[faces[:, 1]] - verts[faces[:, 0]]
    return float(np.abs(e).max())


# ---------------------------------------------------------------------------
# penetration state


@dataclass
class PenetrationState:
    """Per-particle tracing state for one cloth object."""

    z: np.ndarray
    face: np.ndarray
    side: np.ndarray
    tracked: np.ndarray
    dist: np.ndarray = None

    @classmethod
    def empty(cls, n):
        return cls(np.zeros(n, dtype=np.int8), np.full(n, NO_FACE, dtype=np.int64),
                   np.ones(n, dtype=np.int8), np.zeros(n, dtype=bool), np.full(n, np.inf))

    def copy(self):
        return PenetrationState(self.z.copy(), self.face.copy(), self.side.copy(),
                                self.tracked.copy(), self.dist.copy())


def face_normals(verts, faces):
    e = verts[faces[:, 1]] - verts[faces[:, 0]]
    return _perp(e) / np.sqrt((e ** 2).sum(axis=1))[:, None]


def side_of(points, verts, faces, face_ids):
    nf = face_normals(verts, faces)[face_ids]
    s = np.einsum("pc,pc->p", points - verts[faces[face_ids, 0]], nf)
    return np.where(s >= 0.0, 1, -1).astype(np.int8)


def update_penetration_state(x, prev: PenetrationState, verts, mesh: ClothMesh, table: NeighborhoodTable,
                             hash_: SpatialHash, radius: float, faults: Counter | None = None):
    """Trace ``z`` for every particle; returns (new state, face, t, dist, side).

    Particles beyond ``radius`` keep their state and report ``NO_FACE``.
    """
    st = prev.copy()
    j, t, dist = hash_.nearest(x, radius)
    within = j >= 0
    jj = np.where(within, j, 0)
    side = side_of(x, verts, mesh.faces, jj)
    v0 = mesh.faces[jj, 0]
    v1 = mesh.faces[jj, 1]
    free_end = ((t <= 0.0) & (mesh.degree[v0] == 1)) | ((t >= 1.0) & (mesh.degree[v1] == 1))
    has_prev = within & st.tracked & (st.face >= 0)
    pf = np.where(has_prev, st.face, 0)
    local = table.member_mask[pf, jj]
    crossing = has_prev & ~free_end & local
    flip = crossing & (side * table.orient[pf, jj] != st.side)
    violate = has_prev & ~free_end & ~local
    if faults is not None and np.any(violate):
        faults["locality"] += int(violate.sum())
    st.z = np.where(flip, 1 - st.z, st.z).astype(np.int8)
    st.z = np.where(has_prev & free_end, 0, st.z).astype(np.int8)
    st.side = np.where(within, side, st.side).astype(np.int8)
    st.face = np.where(within, j, st.face)
    st.dist = np.where(within, dist, st.dist)
    st.tracked = within
    return st, j, t, dist, side


def signed_distance_cloth(dist, z, side, face_ids, verts, faces, tracing=True):
    """(d, n) from unsigned distance and tracing state.

    With tracing, ``d = (1 - 2z) dist`` and ``n`` points to the particle's
    legal side.  Without it the distance stays unsigned and ``n`` points to
    whichever side the particle is on.
    """
    dist = np.asarray(dist, dtype=float)
    z = np.asarray(z)
    side = np.asarray(side)
    nf = face_normals(verts, faces)[np.where(face_ids >= 0, face_ids, 0)]
    if tracing:
        legal = np.where(z == 0, side, -side)
        d = (1 - 2 * z) * dist
    else:
        legal = side
        d = dist.copy()
    d = np.where(face_ids >= 0, d, np.inf)
    return d, legal[:, None] * nf


def cloth_contact_velocity(face, bary, verts_vel, faces):
    fv = faces[face]
    return bary[..., 0, None] * verts_vel[fv[..., 0]] + bary[..., 1, None] * verts_vel[fv[..., 1]]


def distribute_cloth_force(F, face, bary, faces, n_verts):
    """Split per-contact forces onto the face vertices by barycentric weight."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    face = np.atleast_1d(face)
    bary = np.atleast_2d(bary)
    fv = faces[face]
    out = np.zeros((n_verts, 2))
    idx = np.concatenate([fv[:, 0], fv[:, 1]])
    vals = np.concatenate([bary[:, 0, None] * F, bary[:, 1, None] * F])
    for c in range(2):
        out[:, c] = np.bincount(idx, weights=vals[:, c], minlength=n_verts)
    return out


# ---------------------------------------------------------------------------
# boundary adaptor for the contact models


@dataclass
class ClothTracker:
    """Mutable tracing context for one cloth object across substeps."""

    mesh: ClothMesh
    table: NeighborhoodTable
    state: PenetrationState
    radius: float
    tracing: bool = True
    faults: Counter = field(default_factory=Counter)


class ClothBoundary:
    kind = "cloth"

    def __init__(self, index, tracker: ClothTracker, X, V, t=0.0):
        self.index = index
        self.tracker = tracker
        self.mesh = tracker.mesh
        self.faces = self.mesh.faces
        self.X = np.asarray(X, dtype=float)
        self.V = np.asarray(V, dtype=float)
        self.t = float(t)
        self.Xk = self.X + self.t * self.V
        self.grad_X = np.zeros_like(self.X)
        self.grad_V = np.zeros_like(self.V)
        self._track = None

    def ledger_zeros(self):
        return np.zeros_like(self.X)

    def track(self, x):
        """Advance the penetration state to particle positions ``x``."""
        tr = self.tracker
        cell = 2.0 * max(self.mesh.max_face_extent(self.Xk), tr.radius)
        h = SpatialHash(self.Xk, self.faces, cell, pad=0.0)
        st, j, t, dist, side = update_penetration_state(x, tr.state, self.Xk, self.mesh, tr.table, h,
                                                        tr.radius, tr.faults)
        tr.state = st
        self._track = (j, t, dist, side, st.z.copy())
        return self._track

    def query(self, x):
        if self._track is None:
            self.track(x)
        j, t, dist, side, z = self._track
        within = j >= 0
        jj = np.where(within, j, 0)
        d, n = signed_distance_cloth(dist, z, side, j, self.Xk, self.faces, self.tr_tracing)
        bary = np.stack([1 - t, t], axis=1)
        vc = cloth_contact_velocity(jj, bary, self.V, self.faces)
        legal = np.where(z == 0, side, -side) if self.tr_tracing else side
        sgn = (1 - 2 * z) if self.tr_tracing else np.ones_like(z)
        aux = dict(x=x, face=jj, t=t, dist=dist, legal=legal.astype(float), sgn=sgn.astype(float),
                   g_t=np.zeros(len(x)))
        return Query(d, n, vc, aux)

    @property
    def tr_tracing(self):
        return self.tracker.tracing

    def query_vjp(self, q: Query, g_d, g_n, g_vc, g_c=None):
        aux = q.aux
        x, f, t = aux["x"], aux["face"], aux["t"]
        use = np.isfinite(q.d)
        g_d = np.where(use, g_d, 0.0)
        g_n = np.where(use[:, None], g_n, 0.0)
        g_t = np.where(use, aux["g_t"], 0.0)
        i0, i1 = self.faces[f, 0], self.faces[f, 1]
        a, b = self.Xk[i0], self.Xk[i1]
        e = b - a
        ee = np.einsum("pc,pc->p", e, e)
        el = np.sqrt(ee)
        g_x = np.zeros_like(x)
        g_a = np.zeros_like(x)
        g_b = np.zeros_like(x)
        # distance part: dist = |x - a - t e|, t frozen (stationary in the interior)
        c = a + t[:, None] * e
        delta = x - c
        dist = aux["dist"]
        ok = use & (dist > 0)
        u = np.where(ok[:, None], delta / np.where(ok, dist, 1.0)[:, None], 0.0)
        gdist = aux["sgn"] * g_d
        gu = gdist[:, None] * u
        g_x += gu
        g_a -= (1 - t)[:, None] * gu
        g_b -= t[:, None] * gu
        # normal: n = legal * perp(e)/|e|
        eh = e / el[:, None]
        gnl = aux["legal"][:, None] * g_n
        # d perp(eh)/d e = P (I - eh eh^T)/|e| ; vjp: (I - eh eh^T) P^T g / |e|
        PtG = np.stack([gnl[:, 1], -gnl[:, 0]], axis=1)
        ge = (PtG - np.einsum("pc,pc->p", eh, PtG)[:, None] * eh) / el[:, None]
        g_b += ge
        g_a -= ge
        # contact velocity from vertex velocities
        if g_vc is not None:
            g_vc = np.where(use[:, None], g_vc, 0.0)
            np.add.at(self.grad_V, i0, (1 - t)[:, None] * g_vc)
            np.add.at(self.grad_V, i1, t[:, None] * g_vc)
            g_t = g_t + np.einsum("pc,pc->p", g_vc, self.V[i1] - self.V[i0])
        # barycentric parameter, only where unclamped
        inner = use & (t > 0) & (t < 1)
        gt = np.where(inner, g_t, 0.0)
        w = x - a
        dt_dw = e / ee[:, None]
        dt_de = (w - 2 * t[:, None] * e) / ee[:, None]
        g_x += gt[:, None] * dt_dw
        g_a -= gt[:, None] * (dt_dw + dt_de)
        g_b += gt[:, None] * dt_de
        gX = np.zeros_like(self.X)
        np.add.at(gX, i0, g_a)
        np.add.at(gX, i1, g_b)
        self.grad_X += gX
        self.grad_V += self.t * gX
        return g_x

    def trial(self, xt, q: Query, sel):
        d, n = q.d[sel], q.n[sel]
        xs = q.aux["x"][sel]
        dt_ = d + np.einsum("pc,pc->p", n, xt - xs)
        return dt_, n, (xt, xs, n)

    def trial_vjp(self, q: Query, sel, tcache, g_dt, g_nt):
        xt, xs, n = tcache
        g_xt = g_dt[:, None] * n
        return g_xt, -g_dt[:, None] * n, g_dt.copy(), g_dt[:, None] * (xt - xs) + g_nt

    def accumulate(self, R, q: Query, sel):
        f, t = q.aux["face"][sel], q.aux["t"][sel]
        return distribute_cloth_force(R, f, np.stack([1 - t, t], axis=1), self.faces, len(self.X))

    def accumulate_vjp(self, R, q: Query, sel, g_ledger):
        f, t = q.aux["face"][sel], q.aux["t"][sel]
        g0 = g_ledger[self.faces[f, 0]]
        g1 = g_ledger[self.faces[f, 1]]
        g_R = (1 - t)[:, None] * g0 + t[:, None] * g1
        q.aux["g_t"][sel] += np.einsum("pc,pc->p", g1 - g0, R)
        return g_R, None
