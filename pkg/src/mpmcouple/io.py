"""Frame dumps, loss curves and JSON reports."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .mpm import MATERIALS

_MATERIAL_NAMES = {v: k for k, v in MATERIALS.items()}


def _fmt(v):
    return repr(float(v))


def write_frame(path, particles):
    """One CSV per frame: ``id,x0,x1,v0,v1,material``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x0", "x1", "v0", "v1", "material"])
        for i, (x, v, m) in enumerate(zip(particles.x, particles.v, particles.material)):
            w.writerow([i, _fmt(x[0]), _fmt(x[1]), _fmt(v[0]), _fmt(v[1]), _MATERIAL_NAMES[int(m)]])


def read_frame(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    x = np.array([[float(r["x0"]), float(r["x1"])] for r in rows]).reshape(-1, 2)
    v = np.array([[float(r["v0"]), float(r["v1"])] for r in rows]).reshape(-1, 2)
    return x, v, [r["material"] for r in rows]


def write_loss_history(path, history):
    """``iteration,total,term_0,...`` per evaluated iterate."""
    n_terms = max((len(t) for _, _, t in history), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "total"] + [f"term_{i}" for i in range(n_terms)])
        for it, total, terms in history:
            w.writerow([it, _fmt(total)] + [_fmt(t) for t in terms])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj))
