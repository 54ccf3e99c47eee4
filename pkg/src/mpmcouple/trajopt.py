"""Losses, first-order optimizers and benchmark metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .coupling import CoupledState, StateGrad, System, backward, rollout
from .errors import ConfigError
from .contact import body_contact_velocity
from .sdf import rotation, sdf_query

# ---------------------------------------------------------------------------
# Chamfer distance


def _check_sets(A, B):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.size == 0 or B.size == 0:
        raise ConfigError("chamfer needs two nonempty point sets", "loss.terms")
    return A, B


def chamfer_with_grad(A, B):
    """Squared-distance Chamfer loss and its gradient w.r.t. ``A``.

    Nearest-neighbour assignments are frozen for the gradient.
    """
    A, B = _check_sets(A, B)
    _, ia = cKDTree(B).query(A)
    _, ib = cKDTree(A).query(B)
    da = A - B[ia]
    db = A[ib] - B
    val = (da * da).sum(axis=1).mean() + (db * db).sum(axis=1).mean()
    g = 2.0 * da / len(A)
    np.add.at(g, ib, 2.0 * db / len(B))
    return float(val), g


def chamfer(A, B):
    return chamfer_with_grad(A, B)[0]


# ---------------------------------------------------------------------------
# loss terms


@dataclass
class Trajectory:
    """What the loss terms see: the final state and per-step manipulator states."""

    final: CoupledState
    bodies: list = field(default_factory=list)   # per step: list of 6-vectors
    cloths: list = field(default_factory=list)   # per step: list of X


@dataclass
class ChamferTerm:
    target: np.ndarray
    weight: float = 1.0
    subset: np.ndarray | None = None

    def __call__(self, traj: Trajectory, grad: StateGrad, step_grads: dict):
        x = traj.final.particles.x
        idx = slice(None) if self.subset is None else self.subset
        val, g = chamfer_with_grad(x[idx], self.target)
        grad.particles["x"][idx] += self.weight * g
        return self.weight * val


@dataclass
class PoseTerm:
    body: int
    target: np.ndarray
    weight: float = 1.0

    def __call__(self, traj, grad, step_grads):
        r = traj.final.bodies[self.body][:3] - np.asarray(self.target, dtype=float)
        grad.bodies[self.body][:3] += 2.0 * self.weight * r
        return self.weight * float(r @ r)


@dataclass
class VelocityTerm:
    """Mean squared twist of a body over all steps."""

    body: int
    weight: float = 1.0

    def __call__(self, traj, grad, step_grads):
        T = len(traj.bodies) - 1
        if T <= 0:
            return 0.0
        val = 0.0
        for n in range(1, T + 1):
            tw = traj.bodies[n][self.body][3:]
            val += float(tw @ tw) / T
            g = np.zeros(6)
            g[3:] = 2.0 * self.weight * tw / T
            if n == T:
                grad.bodies[self.body] += g
            else:
                step_grads.setdefault(n, _blank_like(grad)).bodies[self.body] += g
        return self.weight * val


@dataclass
class HingeAngleTerm:
    body: int
    angle: float
    weight: float = 1.0

    def __call__(self, traj, grad, step_grads):
        e = traj.final.bodies[self.body][2] - self.angle
        grad.bodies[self.body][2] += 2.0 * self.weight * e
        return self.weight * float(e * e)


@dataclass
class ClothPoseTerm:
    cloth: int
    targets: np.ndarray
    vertices: np.ndarray | None = None
    weight: float = 1.0

    def __call__(self, traj, grad, step_grads):
        X = traj.final.cloths[self.cloth][0]
        idx = np.arange(len(X)) if self.vertices is None else np.asarray(self.vertices)
        r = X[idx] - self.targets
        gX = grad.cloths[self.cloth][0].copy()
        np.add.at(gX, idx, 2.0 * self.weight * r / len(idx))
        grad.cloths[self.cloth] = (gX, grad.cloths[self.cloth][1])
        return self.weight * float((r * r).sum() / len(idx))


def _blank_like(g: StateGrad):
    return StateGrad({k: np.zeros_like(v) for k, v in g.particles.items()},
                     [np.zeros_like(b) for b in g.bodies],
                     [(np.zeros_like(a), np.zeros_like(b)) for a, b in g.cloths])


@dataclass
class LossSpec:
    terms: list

    def __post_init__(self):
        if not self.terms:
            raise ConfigError("at least one loss term is required", "loss.terms")
        for i, t in enumerate(self.terms):
            if t.weight < 0:
                raise ConfigError("weights must be non-negative", f"loss.terms[{i}].weight")

    def evaluate(self, traj: Trajectory):
        """Returns (total, per-term values, final-state gradient, per-step gradients)."""
        grad = StateGrad.zeros(traj.final)
        step_grads = {}
        vals = [float(t(traj, grad, step_grads)) for t in self.terms]
        return sum(vals), vals, grad, step_grads


def simulate_loss(system: System, state: CoupledState, actions, loss: LossSpec, gradient=True):
    """Roll out, evaluate the loss and (optionally) its gradient w.r.t. the actions."""
    traj = Trajectory(None)

    def record(n, s):
        traj.bodies.append([b.copy() for b in s.bodies])
        traj.cloths.append([X.copy() for X, _ in s.cloths])

    final, tape, report = rollout(system, state, actions, tape=gradient, on_step=record)
    traj.final = final
    total, vals, g_final, step_grads = loss.evaluate(traj)
    g_actions = None
    if gradient:
        g_actions, _ = backward(system, tape, g_final, step_grads)
    return total, vals, g_actions, report


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerConfig:
    algorithm: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 10
    lo: np.ndarray | float | None = None
    hi: np.ndarray | float | None = None

    def __post_init__(self):
        if self.algorithm not in ("adam", "sgd"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}", "optimizer.algorithm")
        if not self.lr > 0:
            raise ConfigError("must be positive", "optimizer.lr")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError("must be in [0, 1)", f"optimizer.{name}")
        if self.iterations < 0:
            raise ConfigError("must be non-negative", "optimizer.iterations")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def project(params, lo=None, hi=None):
    """Clamp into the box [lo, hi]; ``None`` means unbounded."""
    if lo is None and hi is None:
        return params
    return np.clip(params, -np.inf if lo is None else lo, np.inf if hi is None else hi)


def adam_step(params, grads, state: AdamState | None, cfg: OptimizerConfig, lr=None):
    lr = cfg.lr if lr is None else lr
    if state is None:
        state = AdamState(np.zeros_like(params), np.zeros_like(params))
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grads * grads
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    out = params - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return project(out, cfg.lo, cfg.hi), AdamState(m, v, t)


def sgd_step(params, grads, state, cfg: OptimizerConfig, lr=None):
    lr = cfg.lr if lr is None else lr
    return project(params - lr * grads, cfg.lo, cfg.hi), state


@dataclass
class OptimizeResult:
    best_params: np.ndarray
    best_loss: float
    history: list           # (iteration, total, [terms])
    aborted: bool = False
    message: str = ""


def optimize(objective, init, cfg: OptimizerConfig) -> OptimizeResult:
    """Minimize ``objective(params) -> (total, terms, grad)`` from ``init``.

    Runs ``cfg.iterations`` updates, evaluating before each update and once
    after the last; returns the best evaluated parameters.  A non-finite loss
    or gradient halves the learning rate and retries the step once.
    """
    step = adam_step if cfg.algorithm == "adam" else sgd_step
    params = project(np.array(init, dtype=float), cfg.lo, cfg.hi)
    state = None
    history = []
    best = (math.inf, params.copy())
    lr = cfg.lr

    def finite(total, grad):
        return math.isfinite(total) and (grad is None or np.all(np.isfinite(grad)))

    total, terms, grad = objective(params)
    for it in range(cfg.iterations + 1):
        if not finite(total, grad):
            return OptimizeResult(best[1], best[0], history, True, f"non-finite loss at iteration {it}")
        history.append((it, total, list(terms)))
        if total < best[0]:
            best = (total, params.copy())
        if it == cfg.iterations:
            break
        for attempt in range(2):
            cand, cand_state = step(params, grad, state, cfg, lr)
            res = objective(cand)
            if finite(res[0], res[2]):
                break
            lr *= 0.5
        else:
            return OptimizeResult(best[1], best[0], history, True,
                                  f"non-finite loss after halving the learning rate at iteration {it}")
        params, state = cand, cand_state
        total, terms, grad = res
    return OptimizeResult(best[1], best[0], history)


# ---------------------------------------------------------------------------
# benchmark metrics


def _body_frame(points, pose):
    return (np.asarray(points) - pose[:2]) @ rotation(pose[2])


def penetration_count(x, body_state, container) -> int:
    """Particles outside the cavity of an annulus container."""
    return int((~container.cavity(_body_frame(x, body_state))).sum())


class ReboundTracker:
    """Streaming count of contact events that end with an elastic gain.

    An event starts when a particle enters the contact band ``d < d_hat``
    while approaching the boundary; its inward speed is the relative normal
    speed on the last frame before entry.  It ends on the first frame back
    outside the band, where the outward relative normal speed is compared
    with ``threshold`` times the inward one.  Events still open at the end
    count as non-rebounds.
    """

    def __init__(self, shape, d_hat, threshold=1.2):
        self.shape, self.d_hat, self.threshold = shape, d_hat, threshold
        self.events = self.rebounds = 0
        self._inside = self._inward = self._approach = None

    def update(self, x, v, body_state):
        d, n = sdf_query(self.shape, x, body_state[:3])
        c = x - d[:, None] * n
        vc = body_contact_velocity(body_state[3:], body_state[:2], c)
        un = ((v - vc) * n).sum(axis=1)
        inside = d < self.d_hat
        if self._inside is not None:
            enter = inside & ~self._inside & (self._approach > 0)
            leave = ~inside & self._inside & ~np.isnan(self._inward)
            self.events += int(enter.sum())
            self.rebounds += int((leave & (un > self.threshold * self._inward)).sum())
            self._inward = np.where(enter, self._approach, np.where(inside, self._inward, np.nan))
        else:
            self._inward = np.full(len(x), np.nan)
        self._approach = np.where(inside, 0.0, np.maximum(-un, 0.0))
        self._inside = inside

    @property
    def value(self):
        return self.rebounds / self.events if self.events else 0.0


def rebound_metric(frames_x, frames_v, body_states, shape, d_hat, threshold=1.2):
    """Fraction of contact events in a trajectory that rebound (see :class:`ReboundTracker`)."""
    tr = ReboundTracker(shape, d_hat, threshold)
    for x, v, s in zip(frames_x, frames_v, body_states):
        tr.update(np.asarray(x, dtype=float), np.asarray(v, dtype=float), np.asarray(s, dtype=float))
    return tr.value
