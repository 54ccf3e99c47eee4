"""Signed distance fields for rigid shapes in 2D.

Every shape is defined in its own body frame and evaluates a batch of points
``p`` of shape ``(N, 2)``.  ``evaluate`` returns the distance and the contact
normal; ``evaluate_full`` additionally returns the exact derivative of the
distance and the Jacobian of the normal, which the adjoint passes need.

Sign convention: distance is negative inside the solid and the normal points
toward increasing distance.  Singular points (circle centre, capsule core)
use the fixed ``+x`` tie-break so that repeated runs are deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EYE = np.eye(2)


def _sign(a):
    return np.where(a >= 0.0, 1.0, -1.0)


def _norm(v):
    return np.sqrt(np.einsum("...i,...i->...", v, v))


def _unit_and_jac(delta, dir_jac=None):
    """Normalize ``delta`` rows; return (length, unit, d unit / d p).

    ``dir_jac`` is d delta / d p when it is not the identity.
    Zero-length rows get the +x tie-break and a zero Jacobian.
    """
    q = _norm(delta)
    ok = q > 0.0
    qs = np.where(ok, q, 1.0)
    n = delta / qs[:, None]
    n[~ok] = (1.0, 0.0)
    inv = np.where(ok, 1.0 / qs, 0.0)
    nx, ny = n[:, 0], n[:, 1]
    proj = np.empty((len(q), 2, 2))
    proj[:, 0, 0] = (1.0 - nx * nx) * inv
    proj[:, 1, 1] = (1.0 - ny * ny) * inv
    proj[:, 0, 1] = proj[:, 1, 0] = -nx * ny * inv
    if dir_jac is not None:
        proj = proj @ dir_jac
    return q, n, proj


class Shape:
    """Base class for body-frame SDFs."""

    kind = "shape"

    def evaluate(self, p):
        phi, _, n, _ = self.evaluate_full(p)
        return phi, n

    def evaluate_full(self, p):  # pragma: no cover - interface
        raise NotImplementedError

    def bounds(self):  # pragma: no cover - interface
        """Axis-aligned body-frame bounding box ``(lo, hi)``."""
        raise NotImplementedError

    def to_dict(self) -> dict:  # pragma: no cover - interface
        raise NotImplementedError


@dataclass
class Circle(Shape):
    radius: float
    kind = "circle"

    def evaluate_full(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        q, n, jac = _unit_and_jac(p)
        return q - self.radius, n, n, jac

    def bounds(self):
        r = self.radius
        return np.array([-r, -r]), np.array([r, r])

    def area(self):
        return np.pi * self.radius**2

    def second_moment(self):
        # polar moment of area about the centre
        return 0.5 * np.pi * self.radius**4

    def to_dict(self):
        return {"kind": self.kind, "radius": self.radius}


@dataclass
class Box(Shape):
    half_extents: tuple
    kind = "box"

    def evaluate_full(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        h = np.asarray(self.half_extents, dtype=float)
        s = _sign(p)
        q = np.abs(p) - h
        outside = np.max(q, axis=1) > 0.0

        m = np.maximum(q, 0.0)
        d_out, n_out, _ = _unit_and_jac(s * m)
        active = (q > 0.0).astype(float)
        dist = np.where(outside, d_out, 1.0)
        jac_out = (active[:, :, None] * _EYE[None] - n_out[:, :, None] * n_out[:, None, :]) / dist[:, None, None]
        # ds*m/dp is diag(active) so the projector above already carries it

        xmax = q[:, 0] >= q[:, 1]
        n_in = np.where(xmax[:, None], np.stack([s[:, 0], 0 * s[:, 0]], 1), np.stack([0 * s[:, 1], s[:, 1]], 1))
        phi_in = np.max(q, axis=1)

        phi = np.where(outside, d_out, phi_in)
        n = np.where(outside[:, None], n_out, n_in)
        jac = np.where(outside[:, None, None], jac_out, 0.0)
        return phi, n, n, jac

    def bounds(self):
        h = np.asarray(self.half_extents, dtype=float)
        return -h, h.copy()

    def area(self):
        hx, hy = self.half_extents
        return 4.0 * hx * hy

    def second_moment(self):
        hx, hy = self.half_extents
        return 4.0 * hx * hy * (hx**2 + hy**2) / 3.0

    def to_dict(self):
        return {"kind": self.kind, "half_extents": list(self.half_extents)}


@dataclass
class AnnulusContainer(Shape):
    """Ring wall with optional gap centred on the body ``+y`` axis.

    ``opening`` is the half-angle of the gap in radians; 0 gives a closed
    ring.  The wall occupies ``inner_radius <= |p| <= inner_radius + thickness``.
    """

    inner_radius: float
    thickness: float
    opening: float = 0.0
    kind = "annulus"

    @property
    def mid_radius(self):
        return self.inner_radius + 0.5 * self.thickness

    def evaluate_full(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        ra = self.mid_radius
        rb = 0.5 * self.thickness
        sx = _sign(p[:, 0])
        pp = np.stack([np.abs(p[:, 0]), -p[:, 1]], axis=1)
        D = np.zeros((len(p), 2, 2))
        D[:, 0, 0] = sx
        D[:, 1, 1] = -1.0

        ta = np.pi - self.opening
        sc = np.array([np.sin(ta), np.cos(ta)])
        cap = sc[1] * pp[:, 0] > sc[0] * pp[:, 1]

        dc, nc, jc = _unit_and_jac(pp - ra * sc)
        q, u, ju = _unit_and_jac(pp)
        sr = _sign(q - ra)
        phi_ring = np.abs(q - ra)
        n_ring = sr[:, None] * u
        j_ring = sr[:, None, None] * ju

        phi = np.where(cap, dc, phi_ring) - rb
        n_loc = np.where(cap[:, None], nc, n_ring)
        j_loc = np.where(cap[:, None, None], jc, j_ring)
        n = np.einsum("nij,nj->ni", D, n_loc)
        jac = D @ j_loc @ D
        return phi, n, n, jac

    def cavity(self, p):
        """True for points on the inner side of the wall midline."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        return _norm(p) < self.mid_radius

    def bounds(self):
        r = self.inner_radius + self.thickness
        return np.array([-r, -r]), np.array([r, r])

    def area(self):
        frac = 1.0 - self.opening / np.pi
        ro = self.inner_radius + self.thickness
        return frac * np.pi * (ro**2 - self.inner_radius**2)

    def second_moment(self):
        frac = 1.0 - self.opening / np.pi
        ro = self.inner_radius + self.thickness
        return frac * 0.5 * np.pi * (ro**4 - self.inner_radius**4)

    def to_dict(self):
        return {"kind": self.kind, "inner_radius": self.inner_radius,
                "thickness": self.thickness, "opening": self.opening}


@dataclass
class Capsule(Shape):
    """Segment of half-length ``half_length`` along body x, swept by ``radius``."""

    half_length: float
    radius: float
    kind = "capsule"

    def evaluate_full(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        l = self.half_length
        cx = np.clip(p[:, 0], -l, l)
        delta = p - np.stack([cx, np.zeros_like(cx)], axis=1)
        mid = np.abs(p[:, 0]) <= l
        ddelta = np.broadcast_to(_EYE, (len(p), 2, 2)).copy()
        ddelta[mid, 0, 0] = 0.0
        q, n, jac = _unit_and_jac(delta, ddelta)
        return q - self.radius, n, n, jac

    def bounds(self):
        r, l = self.radius, self.half_length
        return np.array([-l - r, -r]), np.array([l + r, r])

    def area(self):
        return 4.0 * self.half_length * self.radius + np.pi * self.radius**2

    def second_moment(self):
        # rectangle + two half discs, parallel-axis on the caps (approximate centroid at the ends)
        l, r = self.half_length, self.radius
        rect = 4 * l * r * ((2 * l) ** 2 + (2 * r) ** 2) / 12.0
        disc = 0.5 * np.pi * r**4 + np.pi * r**2 * l**2
        return rect + disc

    def to_dict(self):
        return {"kind": self.kind, "half_length": self.half_length, "radius": self.radius}


@dataclass
class SampledGrid(Shape):
    """Distance samples on a regular lattice, queried by bilinear interpolation.

    Outside the lattice box the distance is the clamped lookup plus the
    Euclidean offset to the box, which never under-reports distance by more
    than the field's own error.
    """

    lo: np.ndarray
    spacing: float
    values: np.ndarray
    source: dict = field(default_factory=dict)
    kind = "sampled"

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.hi = self.lo + self.spacing * (np.array(self.values.shape) - 1)

    @classmethod
    def from_shape(cls, shape: Shape, resolution: int = 256, pad: float | None = None):
        lo, hi = shape.bounds()
        ext = float(np.max(hi - lo))
        if pad is None:
            pad = 0.1 * ext
        lo = lo - pad
        hi = hi + pad
        spacing = float(np.max(hi - lo)) / (resolution - 1)
        n = np.ceil((hi - lo) / spacing).astype(int) + 1
        gx = lo[0] + spacing * np.arange(n[0])
        gy = lo[1] + spacing * np.arange(n[1])
        pts = np.stack(np.meshgrid(gx, gy, indexing="ij"), axis=-1).reshape(-1, 2)
        vals = shape.evaluate(pts)[0].reshape(n[0], n[1])
        return cls(lo=lo, spacing=spacing, values=vals, source=shape.to_dict())

    def _lookup(self, p):
        """Distance and its exact gradient of the extended field."""
        pc = np.clip(p, self.lo, self.hi)
        inside = (p >= self.lo) & (p <= self.hi)
        ext = p - pc
        e_len, e_dir, _ = _unit_and_jac(ext)
        e_dir = np.where(inside, 0.0, e_dir)

        h = self.spacing
        rel = (pc - self.lo) / h
        shape = np.array(self.values.shape)
        i = np.clip(np.floor(rel).astype(int), 0, shape - 2)
        f = rel - i
        v = self.values
        v00 = v[i[:, 0], i[:, 1]]
        v10 = v[i[:, 0] + 1, i[:, 1]]
        v01 = v[i[:, 0], i[:, 1] + 1]
        v11 = v[i[:, 0] + 1, i[:, 1] + 1]
        fx, fy = f[:, 0], f[:, 1]
        phi = (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10 + (1 - fx) * fy * v01 + fx * fy * v11
        gx = ((1 - fy) * (v10 - v00) + fy * (v11 - v01)) / h
        gy = ((1 - fx) * (v01 - v00) + fx * (v11 - v10)) / h
        grad = np.stack([gx, gy], axis=1) * inside + e_dir
        return phi + e_len, grad

    def evaluate_full(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        phi, grad = self._lookup(p)
        h = self.spacing
        raw = np.empty_like(p)
        jraw = np.empty((len(p), 2, 2))
        for a in range(2):
            off = np.zeros(2)
            off[a] = h
            fp, gp = self._lookup(p + off)
            fm, gm = self._lookup(p - off)
            raw[:, a] = (fp - fm) / (2 * h)
            jraw[:, a, :] = (gp - gm) / (2 * h)
        _, n, proj = _unit_and_jac(raw)
        jac = proj @ jraw
        return phi, grad, n, jac

    def bounds(self):
        return self.lo.copy(), self.hi.copy()

    def area(self):
        return shape_from_dict(self.source).area()

    def second_moment(self):
        return shape_from_dict(self.source).second_moment()

    def to_dict(self):
        return {"kind": self.kind, "source": self.source, "spacing": self.spacing}


def shape_from_dict(spec: dict) -> Shape:
    kind = spec["kind"]
    if kind == "circle":
        return Circle(float(spec["radius"]))
    if kind == "box":
        return Box(tuple(float(v) for v in spec["half_extents"]))
    if kind == "annulus":
        return AnnulusContainer(float(spec["inner_radius"]), float(spec["thickness"]),
                                float(spec.get("opening", 0.0)))
    if kind == "capsule":
        return Capsule(float(spec["half_length"]), float(spec["radius"]))
    raise ValueError(f"unknown shape kind {kind!r}")


# ---------------------------------------------------------------------------
# world-frame queries


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotation_deriv(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, -c], [c, -s]])


def sdf_query(shape: Shape, points, pose):
    """Signed distance and outward unit normal of world ``points``.

    ``pose`` is ``(x, y, theta)`` of the body frame.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    pose = np.asarray(pose, dtype=float)
    R = rotation(pose[2])
    pb = (points - pose[:2]) @ R  # R^T (x - t) for each row
    phi, n = shape.evaluate(pb)
    return phi, n @ R.T


def sdf_query_full(shape: Shape, points, pose):
    """Like :func:`sdf_query` but also returns what the adjoint needs."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    pose = np.asarray(pose, dtype=float)
    R = rotation(pose[2])
    pb = (points - pose[:2]) @ R
    phi, grad, nb, jn = shape.evaluate_full(pb)
    return phi, nb @ R.T, (pb, grad, nb, jn)


def sdf_query_vjp(shape: Shape, points, pose, cache, g_phi, g_n):
    """Pull back gradients on (phi, world normal) to (points, pose)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    pose = np.asarray(pose, dtype=float)
    pb, grad, nb, jn = cache
    R = rotation(pose[2])
    dR = rotation_deriv(pose[2])
    g_n = np.asarray(g_n, dtype=float)
    g_nb = g_n @ R  # R^T g_n per row
    g_theta = np.einsum("ni,ni->", g_n, nb @ dR.T)
    g_pb = g_phi[:, None] * grad + np.einsum("nij,ni->nj", jn, g_nb)
    g_points = g_pb @ R.T
    rel = points - pose[:2]
    # pb = R^T rel ; d pb / d theta = dR^T rel
    g_theta += np.einsum("ni,ni->", g_pb, rel @ dR)
    g_pose = np.array([-g_points[:, 0].sum(), -g_points[:, 1].sum(), g_theta])
    return g_points, g_pose
