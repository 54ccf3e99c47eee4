"""Command-line entry point.

Exit codes: 0 success, 2 scene/configuration error, 3 simulation fault in
strict mode, 4 gradient audit failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, GradientAuditError, SimulationFault
from .io import write_json
from .scene import bundled_scene, bundled_scene_names, parse_scene

EXIT_OK, EXIT_CONFIG, EXIT_FAULT, EXIT_AUDIT = 0, 2, 3, 4


def load_scene(ref, strict=False):
    """A scene file path, or ``bundled:<name>`` for a scene shipped with the package."""
    if ref.startswith("bundled:"):
        name = ref.split(":", 1)[1]
        if name not in bundled_scene_names():
            raise ConfigError(f"unknown bundled scene {name!r}; choose from {bundled_scene_names()}", "--scene")
        scene = bundled_scene(name)
    else:
        scene = parse_scene(ref)
    if strict and not scene.sim.strict:
        scene = scene.model_copy(update={"sim": scene.sim.model_copy(update={"strict": True})})
    return scene


def _say(msg):
    print(msg, file=sys.stderr)


def cmd_simulate(args):
    from .runs import simulate
    scene = load_scene(args.scene, args.strict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, timing = simulate(scene, out)
    write_json(out / "report.json", report)
    write_json(out / "timing.json", timing)
    _say(f"{report['steps']} steps, faults {report['faults']}, cfl_max {report['cfl_max']:.3g}")
    return EXIT_OK


def cmd_bench_contact(args):
    from .runs import bench_contact
    scene = load_scene(args.scene, args.strict)
    if args.frames is not None:
        scene = scene.model_copy(update={"sim": scene.sim.model_copy(update={"steps": args.frames})})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, timing = bench_contact(scene, tuple(args.thickness), log=_say)
    write_json(out / "bench_contact.json", report)
    write_json(out / "timing.json", timing)
    return EXIT_OK


def cmd_grad_check(args):
    from .runs import grad_check
    scene = load_scene(args.scene, args.strict)
    report = grad_check(scene, args.probes, args.eps, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "grad_check.json", report)
    for r in report["rows"]:
        rel = "   -   " if r["rel_error"] is None else f"{r['rel_error']:.2e}"
        print(f"step {r['step']:3d} comp {r['component']:3d}  adjoint {r['adjoint']: .6e}  "
              f"fd {r['finite_difference']: .6e}  rel {rel}")
    print(f"max relative error {report['max_rel_error']:.3e} over {report['checked']} components")
    if report["max_rel_error"] >= args.tol:
        raise GradientAuditError(f"max relative error {report['max_rel_error']:.3e} >= {args.tol}")
    return EXIT_OK


def cmd_optimize(args):
    from .runs import run_optimize, write_optimize_outputs
    scene = load_scene(args.scene, args.strict)
    report, history, best, timing = run_optimize(scene, args.iterations, log=_say)
    write_optimize_outputs(args.out, report, history, best, timing)
    _say(f"initial {report['initial_loss']:.6g} -> best {report['best_loss']:.6g}")
    return EXIT_FAULT if report["aborted"] else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="mpmcouple", description="Differentiable MPM / rigid / cloth coupling.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--scene", required=True, help="scene JSON path or bundled:<name>")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--strict", action="store_true", help="treat any simulation fault as fatal")

    sp = sub.add_parser("simulate", help="forward simulation with frame dumps")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("bench-contact", help="penetration benchmark over contact models and wall thickness")
    common(sp)
    sp.add_argument("--thickness", type=float, nargs="+", default=[1.0, 0.5], help="wall thickness in cells")
    sp.add_argument("--frames", type=int, default=None, help="override the number of steps")
    sp.set_defaults(func=cmd_bench_contact)

    sp = sub.add_parser("grad-check", help="adjoint vs central finite differences")
    common(sp)
    sp.add_argument("--probes", type=int, default=40, help="action components to probe (0 = all)")
    sp.add_argument("--eps", type=float, default=1e-6, help="difference step, relative to each action's bound half-width")
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("optimize", help="trajectory optimisation of the scene's actions")
    common(sp)
    sp.add_argument("--iterations", type=int, default=None, help="override optimizer.iterations")
    sp.set_defaults(func=cmd_optimize)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _say(f"configuration error: {exc}")
        return EXIT_CONFIG
    except SimulationFault as exc:
        _say(f"simulation fault: {exc}")
        return EXIT_FAULT
    except GradientAuditError as exc:
        _say(f"gradient audit failed: {exc}")
        return EXIT_AUDIT


if __name__ == "__main__":
    sys.exit(main())
