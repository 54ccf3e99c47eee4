"""End-to-end runs behind the command-line interface."""
from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .contact import FORECAST, GRID, PARTICLE
from .coupling import rollout
from .errors import ConfigError, SimulationFault
from .io import write_frame, write_json, write_loss_history
from .scene import Scene, build, dump_scene
from .sdf import AnnulusContainer
from .trajopt import ReboundTracker, optimize, penetration_count, simulate_loss


def _resolved(scene: Scene):
    """Scene echo with grid-dependent defaults filled in."""
    data = json.loads(dump_scene(scene))
    dx = 1.0 / scene.sim.res
    c = data["contact"]
    c["d_hat"] = dx if c["d_hat"] is None else c["d_hat"]
    c["beta"] = 3.0 / dx if c["beta"] is None else c["beta"]
    return data


def _faults_dict(faults):
    return {k: int(v) for k, v in sorted(faults.items())}


def _check_strict(scene: Scene, faults):
    if scene.sim.strict and sum(faults.values()):
        raise SimulationFault(f"faults in strict mode: {_faults_dict(faults)}")


# ------------------------------------------------------------------ simulate

def simulate(scene: Scene, out=None):
    """Forward rollout of the scene's action schedule; returns (report, timing)."""
    b = build(scene)
    every = scene.output.frame_every
    frames_dir = None
    if out is not None and every:
        frames_dir = Path(out) / scene.output.frames_dir
        frames_dir.mkdir(parents=True, exist_ok=True)

    def on_step(n, s):
        if frames_dir is not None and n > 0 and n % every == 0:
            write_frame(frames_dir / f"frame_{n:05d}.csv", s.particles)

    final, _, rep = rollout(b.system, b.state, b.actions, tape=False, on_step=on_step)
    report = dict(
        command="simulate",
        scene=_resolved(scene),
        steps=len(b.actions),
        n_particles=final.particles.n,
        faults=_faults_dict(rep.faults),
        cfl_max=rep.cfl_max,
        objective_decrease_mean=float(np.mean(rep.objective_decrease)) if rep.objective_decrease else None,
        final_bodies=[s.tolist() for s in final.bodies],
    )
    if b.loss is not None:
        from .trajopt import Trajectory
        report["loss"] = b.loss.evaluate(Trajectory(final, [final.bodies], [[X for X, _ in final.cloths]]))[0]
    _check_strict(scene, rep.faults)
    return report, dict(wall_time_s=rep.wall_time_s)


# ------------------------------------------------------------ contact bench

BENCH_MODELS = ((GRID, None), (PARTICLE, 400.0), (PARTICLE, 600.0), (FORECAST, None))


def bench_variant(scene: Scene, model, thickness, k=None):
    """Copy of the benchmark scene with a given contact model and wall thickness (in cells)."""
    data = scene.model_dump(mode="json")
    body = data["bodies"][0]
    if body["shape"]["kind"] != "annulus":
        raise ConfigError("the contact benchmark needs an annulus container", "bodies[0].shape.kind")
    body["shape"]["thickness"] = thickness / scene.sim.res
    data["contact"]["model"] = model
    if k is not None:
        data["contact"]["k"] = k
    return Scene.model_validate(data)


def bench_run(scene: Scene):
    """One benchmark cell: returns the metric row and wall time."""
    b = build(scene)
    container = b.system.bodies[0].shape
    if not isinstance(container, AnnulusContainer):
        raise ConfigError("the contact benchmark needs an annulus container", "bodies[0].shape")
    tracker = ReboundTracker(container, b.system.config.contact.d_hat)

    def on_step(n, s):
        tracker.update(s.particles.x, s.particles.v, s.bodies[0])

    final, _, rep = rollout(b.system, b.state, b.actions, tape=False, on_step=on_step)
    row = dict(
        model=scene.contact.model,
        k=scene.contact.k if scene.contact.model == PARTICLE else None,
        thickness=scene.bodies[0].shape.thickness * scene.sim.res,
        n_particles=final.particles.n,
        penetration_count=penetration_count(final.particles.x, final.bodies[0], container),
        objective_decrease_mean=float(np.mean(rep.objective_decrease)) if rep.objective_decrease else None,
        rebound_metric=tracker.value,
        rebound_events=tracker.events,
        cfl_max=rep.cfl_max,
        faults=_faults_dict(rep.faults),
    )
    return row, rep.wall_time_s


def bench_contact(scene: Scene, thicknesses=(1.0, 0.5), models=BENCH_MODELS, log=None):
    """Every (model, thickness) pair; returns (report, timing)."""
    rows, timing = [], []
    for th in thicknesses:
        for model, k in models:
            row, wall = bench_run(bench_variant(scene, model, th, k))
            rows.append(row)
            timing.append(dict(model=model, k=row["k"], thickness=th, wall_time_s=wall))
            if log:
                log(f"{model:9s} k={row['k']} thickness={th}: penetration {row['penetration_count']}, "
                    f"rebound {row['rebound_metric']:.3f} ({wall:.1f} s)")
    report = dict(command="bench-contact", scene=_resolved(scene), rows=rows)
    return report, dict(rows=timing)


# ------------------------------------------------------------ gradient audit

def _objective(b):
    T = len(b.actions)

    def f(flat, gradient=True):
        total, terms, g, rep = simulate_loss(b.system, b.state, flat.reshape(T, -1), b.loss, gradient)
        if b.scene.sim.strict and sum(rep.faults.values()):
            raise SimulationFault(f"faults in strict mode: {_faults_dict(rep.faults)}")
        return total, terms, None if g is None else g.reshape(-1)
    return f


def fd_steps(b, eps):
    """Per-component difference step: ``eps`` times the action's bound half-width.

    Actions bounded to a tiny range (particle impulses) need a step on their
    own scale; unbounded or degenerate bounds fall back to ``eps``.
    """
    scale = np.ones(b.actions.size)
    if b.lo is not None:
        half = 0.5 * (b.hi - b.lo).reshape(-1)
        ok = np.isfinite(half) & (half > 0)
        scale[ok] = half[ok]
    return eps * scale


def grad_check(scene: Scene, probes=40, eps=1e-6, floor=1e-8, seed=0):
    """Central differences against the adjoint on sampled action components."""
    b = build(scene)
    if b.loss is None:
        raise ConfigError("grad-check needs at least one loss term", "loss.terms")
    f = _objective(b)
    a0 = b.actions.reshape(-1).copy()
    steps = fd_steps(b, eps)
    total, _, g = f(a0)
    rng = np.random.default_rng(seed)
    idx = np.arange(a0.size) if probes <= 0 or probes >= a0.size else np.sort(
        rng.choice(a0.size, probes, replace=False))
    D = b.actions.shape[1]
    rows, worst = [], 0.0
    for i in idx:
        h = steps[i]
        ap, am = a0.copy(), a0.copy()
        ap[i] += h
        am[i] -= h
        fd = (f(ap, False)[0] - f(am, False)[0]) / (2 * h)
        scale = max(abs(fd), abs(g[i]))
        rel = float(abs(fd - g[i]) / scale) if scale > floor else None
        if rel is not None:
            worst = max(worst, rel)
        rows.append(dict(index=int(i), step=int(i // D), component=int(i % D), fd_step=float(h),
                         adjoint=float(g[i]), finite_difference=float(fd), rel_error=rel))
    return dict(command="grad-check", scene=_resolved(scene), loss=total, eps=eps, floor=floor,
                n_probes=len(rows), checked=sum(r["rel_error"] is not None for r in rows),
                max_rel_error=worst, rows=rows)


# -------------------------------------------------------------- optimization

def run_optimize(scene: Scene, iterations=None, log=None):
    """Optimise the scene's actions; returns (report, history, best actions, timing)."""
    b = build(scene)
    if b.loss is None:
        raise ConfigError("optimize needs at least one loss term", "loss.terms")
    cfg = b.optimizer
    if iterations is not None:
        cfg.iterations = iterations
    if cfg.lo is not None:
        cfg.lo, cfg.hi = cfg.lo.reshape(-1), cfg.hi.reshape(-1)
    f = _objective(b)
    t0 = time.perf_counter()

    def logged(flat):
        out = f(flat)
        if log:
            log(f"loss {out[0]:.6g}")
        return out

    res = optimize(logged, b.actions.reshape(-1), cfg)
    best = res.best_params.reshape(b.actions.shape)
    report = dict(command="optimize", scene=_resolved(scene), iterations=cfg.iterations,
                  initial_loss=res.history[0][1] if res.history else None, best_loss=res.best_loss,
                  final_loss=res.history[-1][1] if res.history else None,
                  aborted=res.aborted, message=res.message)
    return report, res.history, best, dict(wall_time_s=time.perf_counter() - t0)


def write_optimize_outputs(out, report, history, best, timing):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", report)
    write_loss_history(out / "loss.csv", history)
    np.savetxt(out / "actions.csv", best, delimiter=",", fmt="%.17g")
    write_json(out / "timing.json", timing)


# ---------------------------------------------------------- tracing ablation

def with_tracing(scene: Scene, tracing: bool) -> Scene:
    """The scene with penetration tracing switched on or off for every cloth."""
    data = scene.model_dump(mode="json")
    for c in data["cloths"]:
        c["tracing"] = tracing
    return Scene.model_validate(data)


def far_side_fraction(scene: Scene):
    """Fraction of particles below a strip cloth at the end of the rollout.

    The rope's height under each particle is interpolated from its vertices;
    particles outside the rope's horizontal span count as not crossed.
    """
    b = build(scene)
    final, _, rep = rollout(b.system, b.state, b.actions, tape=False)
    X = final.cloths[0][0]
    x = final.particles.x
    order = np.argsort(X[:, 0])
    under = np.interp(x[:, 0], X[order, 0], X[order, 1])
    inside = (x[:, 0] >= X[:, 0].min()) & (x[:, 0] <= X[:, 0].max())
    return float(np.mean(inside & (x[:, 1] < under))), _faults_dict(rep.faults)
