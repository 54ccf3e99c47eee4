"""Planar rigid bodies: free (wrench-driven), single hinge and kinematic.

Every body carries a 6-vector state ``(x, y, theta, vx, vy, w)`` for its
centre of mass.  A hinged body's true coordinates are ``(theta, w)``; its
position and linear velocity are derived from them, so the anchor never
drifts.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .sdf import Shape, rotation, rotation_deriv, sdf_query

DYNAMIC, HINGE, KINEMATIC = "dynamic", "hinge", "kinematic"
MODES = (DYNAMIC, HINGE, KINEMATIC)


def _perp(r):
    r = np.asarray(r)
    return np.stack([-r[..., 1], r[..., 0]], axis=-1)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


@dataclass
class RigidBody:
    shape: Shape
    mass: float = 1.0
    inertia: float | None = None
    mode: str = DYNAMIC
    anchor: np.ndarray | None = None      # hinge pivot in body frame (relative to the COM)
    gravity_scale: float = 1.0
    damping: float = 0.0
    pivot: np.ndarray = field(init=False, default=None)  # hinge pivot in world

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}", "bodies.mode")
        if not self.mass > 0:
            raise ConfigError("mass must be positive", "bodies.mass")
        if self.inertia is None:
            self.inertia = self.mass * self.shape.second_moment() / self.shape.area()
        if not self.inertia > 0:
            raise ConfigError("inertia must be positive", "bodies.inertia")
        if self.mode == HINGE:
            if self.anchor is None:
                raise ConfigError("hinge bodies need an anchor", "bodies.anchor")
            self.anchor = np.asarray(self.anchor, dtype=float)

    @property
    def pivot_inertia(self):
        return self.inertia + self.mass * float(self.anchor @ self.anchor)

    def initial_state(self, pos=(0.0, 0.0), theta=0.0, twist=(0.0, 0.0, 0.0)):
        """State vector; for a hinge, ``pos`` is the world pivot and only ``twist[2]`` is used."""
        if self.mode == HINGE:
            self.pivot = np.asarray(pos, dtype=float)
            return hinge_state(self, theta, twist[2])
        return np.array([pos[0], pos[1], theta, twist[0], twist[1], twist[2]], dtype=float)


def hinge_state(body: RigidBody, theta, omega):
    r = -rotation(theta) @ body.anchor          # pivot -> COM
    com = body.pivot + r
    v = omega * _perp(r)
    return np.array([com[0], com[1], theta, v[0], v[1], omega])


def hinge_reduce(body: RigidBody, state, g6):
    """Pull a gradient on the derived 6-vector back to (theta, w) slots."""
    theta, omega = state[2], state[5]
    dr = -rotation_deriv(theta) @ body.anchor
    r = -rotation(theta) @ body.anchor
    g = np.zeros(6)
    g[2] = g6[2] + g6[:2] @ dr + omega * (g6[3:5] @ _perp(dr))
    g[5] = g6[5] + g6[3:5] @ _perp(r)
    return g


def integrate_rigid(body: RigidBody, state, wrench, action, dt, gravity=(0.0, 0.0)):
    """One semi-implicit Euler step.  ``wrench`` = (Fx, Fy, torque about the COM)."""
    state = np.asarray(state, dtype=float)
    wrench = np.asarray(wrench, dtype=float)
    action = np.asarray(action, dtype=float)
    g = np.asarray(gravity, dtype=float) * body.gravity_scale
    if body.mode == KINEMATIC:
        return np.concatenate([state[:3] + action * dt, action])
    if body.mode == DYNAMIC:
        F = wrench[:2] + action[:2]
        v = state[3:5] + (F / body.mass + g - body.damping * state[3:5]) * dt
        w = state[5] + ((wrench[2] + action[2]) / body.inertia - body.damping * state[5]) * dt
        tw = np.array([v[0], v[1], w])
        return np.concatenate([state[:3] + tw * dt, tw])
    r = state[:2] - body.pivot
    tau = wrench[2] + _cross(r, wrench[:2] + body.mass * g) + action[2] - body.damping * state[5]
    w = state[5] + tau / body.pivot_inertia * dt
    return hinge_state(body, state[2] + w * dt, w)


def adjoint_integrate_rigid(body: RigidBody, state, wrench, action, dt, g_out, gravity=(0.0, 0.0)):
    """Reverse of :func:`integrate_rigid`; returns (g_state, g_wrench, g_action)."""
    state = np.asarray(state, dtype=float)
    wrench = np.asarray(wrench, dtype=float)
    g_out = np.asarray(g_out, dtype=float)
    g_state, g_wrench, g_action = np.zeros(6), np.zeros(3), np.zeros(3)
    if body.mode == KINEMATIC:
        g_state[:3] = g_out[:3]
        g_action[:] = g_out[:3] * dt + g_out[3:]
        return g_state, g_wrench, g_action
    if body.mode == DYNAMIC:
        g_tw = g_out[3:] + dt * g_out[:3]
        g_state[:3] = g_out[:3]
        g_state[3:] = g_tw * (1.0 - body.damping * dt)
        g_wrench[:2] = g_tw[:2] * dt / body.mass
        g_wrench[2] = g_tw[2] * dt / body.inertia
        g_action[:] = g_wrench
        return g_state, g_wrench, g_action
    out = integrate_rigid(body, state, wrench, action, dt, gravity)
    gr = hinge_reduce(body, out, g_out)
    g_w = gr[5] + dt * gr[2]
    g_theta = gr[2]
    g_tau = g_w * dt / body.pivot_inertia
    g = np.asarray(gravity, dtype=float) * body.gravity_scale
    Ftot = wrench[:2] + body.mass * g
    r = state[:2] - body.pivot
    g_state[:2] = g_tau * np.array([Ftot[1], -Ftot[0]])
    g_state[2] = g_theta
    g_state[5] = g_w - g_tau * body.damping
    g_wrench[:2] = g_tau * np.array([-r[1], r[0]])
    g_wrench[2] = g_tau
    g_action[2] = g_tau
    return g_state, g_wrench, g_action


def rigid_sdf_world(body: RigidBody, state, points):
    """Signed distance and world normal of ``body`` at world points."""
    return sdf_query(body.shape, np.atleast_2d(points), np.asarray(state)[:3])
