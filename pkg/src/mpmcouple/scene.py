"""Scene files: JSON schema, validation and construction of a runnable system."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import mpm
from .cloth import ClothModel
from .cloth_contact import ClothMesh, PenetrationState, load_obj
from .contact import ContactParams
from .coupling import ClothObject, CoupledState, SimConfig, System
from .errors import ConfigError
from .rigid import RigidBody
from .sdf import SampledGrid, shape_from_dict
from .trajopt import (ChamferTerm, ClothPoseTerm, HingeAngleTerm, LossSpec, OptimizerConfig, PoseTerm,
                      VelocityTerm)


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Vec2 = tuple[float, float]
Vec3 = tuple[float, float, float]
Positive = Annotated[float, Field(gt=0)]
NonNeg = Annotated[float, Field(ge=0)]


# --------------------------------------------------------------------- shapes

class CircleShape(Strict):
    kind: Literal["circle"]
    radius: Positive


class BoxShape(Strict):
    kind: Literal["box"]
    half_extents: tuple[Positive, Positive]


class AnnulusShape(Strict):
    kind: Literal["annulus"]
    inner_radius: Positive
    thickness: Positive
    opening: Annotated[float, Field(ge=0, lt=3.1416)] = 0.0


class CapsuleShape(Strict):
    kind: Literal["capsule"]
    half_length: NonNeg
    radius: Positive


ShapeSpec = Annotated[Union[CircleShape, BoxShape, AnnulusShape, CapsuleShape], Field(discriminator="kind")]


# -------------------------------------------------------------------- regions

class BoxRegion(Strict):
    kind: Literal["box"]
    center: Vec2
    half_extents: tuple[Positive, Positive]

    def contains(self, p):
        c, h = np.array(self.center), np.array(self.half_extents)
        return np.all(np.abs(p - c) <= h, axis=1)

    def bounds(self):
        c, h = np.array(self.center), np.array(self.half_extents)
        return c - h, c + h


class DiskRegion(Strict):
    """Disk, optionally cut to ``y <= y_max``."""

    kind: Literal["disk"]
    center: Vec2
    radius: Positive
    y_max: float | None = None

    def contains(self, p):
        inside = ((p - np.array(self.center)) ** 2).sum(axis=1) < self.radius ** 2
        if self.y_max is not None:
            inside &= p[:, 1] <= self.y_max
        return inside

    def bounds(self):
        c = np.array(self.center)
        return c - self.radius, c + self.radius


RegionSpec = Annotated[Union[BoxRegion, DiskRegion], Field(discriminator="kind")]


def sample_region(region, spacing, sampler="lattice", rng=None):
    """Points of a region: cell-centred lattice or uniform random at equal density."""
    if sampler == "lattice":
        g = np.arange(0.5 * spacing, 1.0, spacing)
        P = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
        return P[region.contains(P)]
    lo, hi = region.bounds()
    n = int(round(np.prod(hi - lo) / spacing ** 2))
    P = lo + (hi - lo) * rng.random((n, 2))
    return P[region.contains(P)]


# ----------------------------------------------------------------- sections

class SimSection(Strict):
    dim: Literal[2] = 2
    res: Annotated[int, Field(ge=8)] = 64
    dt: Positive = 1e-4
    substeps: Annotated[int, Field(ge=1)] = 10
    steps: Annotated[int, Field(ge=0)] = 10
    gravity: Vec2 = (0.0, -9.8)
    strict: bool = False
    seed: int = 0


class Block(Strict):
    region: RegionSpec
    material: Literal["elastic", "plastic", "liquid"] = "elastic"
    sampler: Literal["lattice", "random"] = "lattice"
    per_cell: Annotated[float, Field(gt=0)] = 2.0    # particles per cell along each axis
    density: Positive = 1.0
    youngs_modulus: Positive = 1e3
    poisson_ratio: Annotated[float, Field(ge=0, lt=0.5)] = 0.2
    bulk_modulus: Positive = 400.0
    yield_stress: Annotated[float, Field(ge=0, lt=1)] = 0.05
    velocity: Vec2 = (0.0, 0.0)


class MpmSection(Strict):
    blocks: list[Block] = Field(default_factory=list)


class BodySpec(Strict):
    shape: ShapeSpec
    mode: Literal["dynamic", "hinge", "kinematic"] = "dynamic"
    mass: Positive = 1.0
    inertia: Positive | None = None
    position: Vec2 = (0.5, 0.5)        # centre of mass, or the world pivot for hinges
    angle: float = 0.0
    twist: Vec3 = (0.0, 0.0, 0.0)
    anchor: Vec2 | None = None          # hinge pivot in the body frame
    gravity_scale: float = 1.0
    damping: NonNeg = 0.0
    sampled_resolution: Annotated[int, Field(ge=8)] | None = None

    @model_validator(mode="after")
    def _hinge(self):
        if self.mode == "hinge" and self.anchor is None:
            raise ValueError("hinge bodies need an anchor")
        return self


class StripCloth(Strict):
    kind: Literal["strip"]
    start: Vec2
    end: Vec2
    segments: Annotated[int, Field(ge=1)]


class LoopCloth(Strict):
    kind: Literal["loop"]
    center: Vec2
    radius: Positive
    segments: Annotated[int, Field(ge=3)]


class ObjCloth(Strict):
    kind: Literal["obj"]
    path: str


class ClothSpec(Strict):
    geometry: Annotated[Union[StripCloth, LoopCloth, ObjCloth], Field(discriminator="kind")]
    stretch: NonNeg = 100.0
    bending: NonNeg = 0.0
    damping: NonNeg = 0.0
    line_density: Positive = 1.0
    control: list[Annotated[int, Field(ge=0)]] = Field(default_factory=list)
    gravity_scale: float = 1.0
    substeps: Annotated[int, Field(ge=1)] | None = None
    tracing: bool = True
    depth: Annotated[int, Field(ge=0)] = 2


class ContactSection(Strict):
    model: Literal["grid", "particle", "forecast"] = "forecast"
    d_hat: Positive | None = None           # default: one grid cell
    mu: NonNeg = 0.5
    beta: Positive | None = None            # default: 3 / dx
    alpha: Annotated[float, Field(gt=0, le=1)] = 0.2
    k: Positive = 400.0


class ImpulseSelection(Strict):
    block: Annotated[int, Field(ge=0)] | None = None
    region: RegionSpec | None = None
    indices: list[Annotated[int, Field(ge=0)]] | None = None


class ActionSegment(Strict):
    """Constant action over ``[start, stop)``; ``alternate`` flips its sign every that many steps."""

    target: Literal["body", "cloth", "impulse"]
    index: Annotated[int, Field(ge=0)] = 0
    value: list[float]
    start: Annotated[int, Field(ge=0)] = 0
    stop: Annotated[int, Field(ge=0)] | None = None
    alternate: Annotated[int, Field(ge=1)] | None = None


class Bound(Strict):
    target: Literal["body", "cloth", "impulse"]
    index: Annotated[int, Field(ge=0)] = 0
    lo: list[float]
    hi: list[float]


class ControlSection(Strict):
    impulse_selection: ImpulseSelection | None = None
    schedule: list[ActionSegment] = Field(default_factory=list)
    bounds: list[Bound] = Field(default_factory=list)


class ChamferSpec(Strict):
    kind: Literal["chamfer"]
    weight: NonNeg = 1.0
    target: RegionSpec
    spacing: Positive | None = None         # default: half a grid cell
    block: Annotated[int, Field(ge=0)] | None = None


class PoseSpec(Strict):
    kind: Literal["pose"]
    weight: NonNeg = 1.0
    body: Annotated[int, Field(ge=0)]
    target: Vec3


class VelocitySpec(Strict):
    kind: Literal["velocity"]
    weight: NonNeg = 1.0
    body: Annotated[int, Field(ge=0)]


class HingeAngleSpec(Strict):
    kind: Literal["hinge_angle"]
    weight: NonNeg = 1.0
    body: Annotated[int, Field(ge=0)]
    angle: float


class ClothPoseSpec(Strict):
    kind: Literal["cloth_pose"]
    weight: NonNeg = 1.0
    cloth: Annotated[int, Field(ge=0)] = 0
    vertices: list[Annotated[int, Field(ge=0)]]
    targets: list[Vec2]

    @model_validator(mode="after")
    def _lengths(self):
        if len(self.vertices) != len(self.targets):
            raise ValueError("vertices and targets differ in length")
        return self


TermSpec = Annotated[Union[ChamferSpec, PoseSpec, VelocitySpec, HingeAngleSpec, ClothPoseSpec],
                     Field(discriminator="kind")]


class LossSection(Strict):
    terms: list[TermSpec] = Field(default_factory=list)


class OptimizerSection(Strict):
    algorithm: Literal["adam", "sgd"] = "adam"
    lr: Positive = 0.01
    beta1: Annotated[float, Field(ge=0, lt=1)] = 0.9
    beta2: Annotated[float, Field(ge=0, lt=1)] = 0.999
    eps: Positive = 1e-8
    iterations: Annotated[int, Field(ge=0)] = 10


class OutputSection(Strict):
    frame_every: Annotated[int, Field(ge=0)] = 1      # 0 writes no frame files
    frames_dir: str = "frames"


class Scene(Strict):
    sim: SimSection = SimSection()
    mpm: MpmSection = MpmSection()
    bodies: list[BodySpec] = Field(default_factory=list)
    cloths: list[ClothSpec] = Field(default_factory=list)
    contact: ContactSection = ContactSection()
    control: ControlSection = ControlSection()
    loss: LossSection = LossSection()
    optimizer: OptimizerSection = OptimizerSection()
    output: OutputSection = OutputSection()

    @model_validator(mode="after")
    def _references(self):
        nb, nc, nk = len(self.bodies), len(self.cloths), len(self.mpm.blocks)
        for i, seg in enumerate(self.control.schedule):
            _check_target(seg.target, seg.index, nb, nc, f"control.schedule[{i}].index")
        for i, b in enumerate(self.control.bounds):
            _check_target(b.target, b.index, nb, nc, f"control.bounds[{i}].index")
        sel = self.control.impulse_selection
        if sel is not None and sel.block is not None and sel.block >= nk:
            raise ConfigError("no such particle block", "control.impulse_selection.block")
        for i, t in enumerate(self.loss.terms):
            body = getattr(t, "body", None)
            if body is not None and body >= nb:
                raise ConfigError("no such body", f"loss.terms[{i}].body")
            if isinstance(t, ClothPoseSpec) and t.cloth >= nc:
                raise ConfigError("no such cloth", f"loss.terms[{i}].cloth")
            if isinstance(t, HingeAngleSpec) and self.bodies[body].mode != "hinge":
                raise ConfigError("body is not hinged", f"loss.terms[{i}].body")
            if isinstance(t, ChamferSpec) and t.block is not None and t.block >= nk:
                raise ConfigError("no such particle block", f"loss.terms[{i}].block")
        if self.cloths and self.contact.model == "grid":
            raise ConfigError("the grid contact model supports rigid bodies only", "contact.model")
        return self


def _check_target(target, index, nb, nc, path):
    if target == "body" and index >= nb:
        raise ConfigError("no such body", path)
    if target == "cloth" and index >= nc:
        raise ConfigError("no such cloth", path)


# ------------------------------------------------------------------ parsing

def _error_path(loc):
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        elif part in ("box", "disk", "circle", "annulus", "capsule", "strip", "loop", "obj", "chamfer",
                      "pose", "velocity", "hinge_angle", "cloth_pose", "function-after"):
            continue        # discriminator tags are not part of the JSON path
        else:
            out += ("." if out else "") + str(part)
    return out


def validate_scene(data) -> Scene:
    if not isinstance(data, dict):
        raise ConfigError("a scene must be a JSON object", "")
    try:
        return Scene.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        inner = err.get("ctx", {}).get("error")
        if isinstance(inner, ConfigError):
            raise inner from None
        raise ConfigError(err["msg"], _error_path(err["loc"])) from None


def parse_scene(path) -> Scene:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"cannot read {path}", "") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (line {exc.lineno})", "") from None
    return validate_scene(data)


def dump_scene(scene: Scene) -> str:
    """Canonical JSON with every default resolved."""
    return json.dumps(scene.model_dump(mode="json"), indent=2, sort_keys=True)


def bundled_scene(name) -> Scene:
    text = resources.files("mpmcouple").joinpath("scenes", f"{name}.json").read_text()
    return validate_scene(json.loads(text))


def bundled_scene_names():
    folder = resources.files("mpmcouple").joinpath("scenes")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


# ----------------------------------------------------------------- building

@dataclass
class Built:
    scene: Scene
    system: System
    state: CoupledState
    actions: np.ndarray          # (T, D) schedule
    loss: LossSpec | None
    optimizer: OptimizerConfig
    lo: np.ndarray | None        # (T, D) projection box or None
    hi: np.ndarray | None
    blocks: list                 # particle index range of each block


def _lame(block: Block):
    if block.material == "liquid":
        return 0.0, block.bulk_modulus
    E, nu = block.youngs_modulus, block.poisson_ratio
    return E / (2 * (1 + nu)), E * nu / ((1 + nu) * (1 - 2 * nu))


def _particles(scene: Scene, rng):
    dx = 1.0 / scene.sim.res
    xs, vs, ms, vols, mats, mus, lams, ys, ranges = [], [], [], [], [], [], [], [], []
    start = 0
    for i, b in enumerate(scene.mpm.blocks):
        h = dx / b.per_cell
        P = sample_region(b.region, h, b.sampler, rng)
        if len(P) == 0:
            raise ConfigError("region contains no particles", f"mpm.blocks[{i}].region")
        mu, lam = _lame(b)
        n = len(P)
        xs.append(P)
        vs.append(np.tile(b.velocity, (n, 1)))
        vols.append(np.full(n, h * h))
        ms.append(np.full(n, b.density * h * h))
        mats.append(np.full(n, mpm.MATERIALS[b.material]))
        mus.append(np.full(n, mu))
        lams.append(np.full(n, lam))
        ys.append(np.full(n, b.yield_stress if b.material == "plastic" else 0.0))
        ranges.append((start, start + n))
        start += n
    if not xs:
        return mpm.ParticleSet(np.zeros((0, 2)), np.zeros((0, 2)), 1.0, 1.0, 0, 0.0, 0.0, 0.0), []
    cat = np.concatenate
    return mpm.ParticleSet(cat(xs), cat(vs), cat(ms), cat(vols), cat(mats), cat(mus), cat(lams), cat(ys)), ranges


def _mesh(spec: ClothSpec, path):
    g = spec.geometry
    if g.kind == "strip":
        return ClothMesh.strip(g.start, g.end, g.segments)
    if g.kind == "loop":
        return ClothMesh.loop(g.center, g.radius, g.segments)
    try:
        return load_obj(g.path)
    except OSError:
        raise ConfigError(f"cannot read {g.path}", f"{path}.geometry.path") from None


def _layout_offsets(system: System):
    """Start column of each body / cloth / impulse block in the action vector."""
    lay = system.layout
    body = [3 * i for i in range(lay.n_bodies)]
    cloth, i = [], 3 * lay.n_bodies
    for nc in lay.cloth_controls:
        cloth.append(i)
        i += 2 * nc
    return body, cloth, i


def _slot(system, target, index, path):
    body, cloth, imp = _layout_offsets(system)
    lay = system.layout
    if target == "body":
        return body[index], 3
    if target == "cloth":
        return cloth[index], 2 * lay.cloth_controls[index]
    if lay.n_impulse == 0:
        raise ConfigError("no impulse selection declared", path)
    return imp, 2 * lay.n_impulse


def _expand(values, width, per, path):
    v = np.asarray(values, dtype=float)
    if v.size == width:
        return v
    if v.size == per and width % per == 0:
        return np.tile(v, width // per)
    raise ConfigError(f"expected {per} or {width} values, got {v.size}", path)


def build(scene: Scene) -> Built:
    sim = scene.sim
    rng = np.random.default_rng(sim.seed)
    dx = 1.0 / sim.res
    c = scene.contact
    params = ContactParams(model=c.model, d_hat=dx if c.d_hat is None else c.d_hat, mu=c.mu,
                           beta=3.0 / dx if c.beta is None else c.beta, alpha=c.alpha, k=c.k)
    config = SimConfig(res=sim.res, dt=sim.dt, substeps=sim.substeps, gravity=tuple(sim.gravity),
                       contact=params, strict=sim.strict)
    particles, ranges = _particles(scene, rng)

    bodies, body_states = [], []
    for i, b in enumerate(scene.bodies):
        shape = shape_from_dict(b.shape.model_dump())
        if b.sampled_resolution is not None:
            shape = SampledGrid.from_shape(shape, b.sampled_resolution)
        try:
            body = RigidBody(shape, b.mass, b.inertia, b.mode, b.anchor, b.gravity_scale, b.damping)
        except ConfigError as exc:
            raise ConfigError(exc.message, f"bodies[{i}].{exc.path.split('.')[-1]}") from None
        bodies.append(body)
        body_states.append(body.initial_state(b.position, b.angle, b.twist))

    cloths, cloth_states = [], []
    for j, cs in enumerate(scene.cloths):
        mesh = _mesh(cs, f"cloths[{j}]")
        try:
            model = ClothModel(mesh, cs.stretch, cs.bending, cs.damping, cs.line_density,
                               np.array(cs.control, dtype=np.int64), cs.gravity_scale, cs.substeps)
            model.n_substeps(config.step_dt)
            obj = ClothObject(model, cs.tracing, cs.depth)
        except ConfigError as exc:
            raise ConfigError(exc.message, f"cloths[{j}].{exc.path.split('.')[-1]}") from None
        cloths.append(obj)
        cloth_states.append((mesh.verts.copy(), mesh.vel.copy()))

    selection = np.zeros(0, dtype=np.int64)
    sel = scene.control.impulse_selection
    if sel is not None:
        if sel.indices is not None:
            selection = np.array(sel.indices, dtype=np.int64)
            if selection.size and selection.max() >= particles.n:
                raise ConfigError("impulse selection index out of range", "control.impulse_selection.indices")
        else:
            mask = np.ones(particles.n, dtype=bool)
            if sel.block is not None:
                mask[:] = False
                mask[slice(*ranges[sel.block])] = True
            if sel.region is not None:
                mask &= sel.region.contains(particles.x)
            selection = np.nonzero(mask)[0]
        if selection.size == 0:
            raise ConfigError("selects no particles", "control.impulse_selection")

    system = System(config, bodies, cloths, selection)
    state = CoupledState(particles, body_states, cloth_states,
                         [PenetrationState.empty(particles.n) for _ in cloths])
    system.check_state(state)

    T = sim.steps
    actions = system.zero_actions(T)
    for i, seg in enumerate(scene.control.schedule):
        path = f"control.schedule[{i}]"
        col, width = _slot(system, seg.target, seg.index, path + ".target")
        per = {"body": 3, "cloth": 2, "impulse": 2}[seg.target]
        val = _expand(seg.value, width, per, path + ".value")
        stop = T if seg.stop is None else min(seg.stop, T)
        for n in range(seg.start, stop):
            sign = -1.0 if seg.alternate and ((n - seg.start) // seg.alternate) % 2 else 1.0
            actions[n, col:col + width] += sign * val

    lo = hi = None
    if scene.control.bounds:
        lo = np.full(system.layout.size, -np.inf)
        hi = np.full(system.layout.size, np.inf)
        for i, b in enumerate(scene.control.bounds):
            path = f"control.bounds[{i}]"
            col, width = _slot(system, b.target, b.index, path + ".target")
            per = {"body": 3, "cloth": 2, "impulse": 2}[b.target]
            lo[col:col + width] = _expand(b.lo, width, per, path + ".lo")
            hi[col:col + width] = _expand(b.hi, width, per, path + ".hi")
            if np.any(lo > hi):
                raise ConfigError("lo exceeds hi", path)
        lo, hi = np.tile(lo, (T, 1)), np.tile(hi, (T, 1))

    terms = []
    for i, t in enumerate(scene.loss.terms):
        if isinstance(t, ChamferSpec):
            pts = sample_region(t.target, 0.5 * dx if t.spacing is None else t.spacing)
            if len(pts) == 0:
                raise ConfigError("target region is empty", f"loss.terms[{i}].target")
            subset = None if t.block is None else np.arange(*ranges[t.block])
            terms.append(ChamferTerm(pts, t.weight, subset))
        elif isinstance(t, PoseSpec):
            terms.append(PoseTerm(t.body, np.array(t.target), t.weight))
        elif isinstance(t, VelocitySpec):
            terms.append(VelocityTerm(t.body, t.weight))
        elif isinstance(t, HingeAngleSpec):
            terms.append(HingeAngleTerm(t.body, t.angle, t.weight))
        else:
            nv = len(cloth_states[t.cloth][0])
            if max(t.vertices) >= nv:
                raise ConfigError("vertex out of range", f"loss.terms[{i}].vertices")
            terms.append(ClothPoseTerm(t.cloth, np.array(t.targets, dtype=float), np.array(t.vertices), t.weight))
    loss = LossSpec(terms) if terms else None

    o = scene.optimizer
    opt = OptimizerConfig(o.algorithm, o.lr, o.beta1, o.beta2, o.eps, o.iterations, lo, hi)
    return Built(scene, system, state, actions, loss, opt, lo, hi, ranges)
