"""Desk-scale tabletop plant for the impedance controller.

A tick of :func:`run_scenario` reads the reference sample, advances the
impedance filter with the surface contact force as disturbance, solves IK
toward the integrated virtual position and takes ``FK(q)`` as the measured
pose for the next tick (the joint controllers are assumed to track perfectly).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import (EmptyTrace, NonFiniteState, NotConverged, ParseError, SimulationAborted,
                     UnknownTask, ValidationError)
from .impedance import (ArmId, ImpedanceParams, ImpedanceState, is_stable_step, step_impedance,
                        virtual_force)
from .kinematics import IkOptions, forward_kinematics, solve_ik_dls

SAMPLE_RATE = 50.0

TASK_ARMS = {
    "follow_surface": ArmId.RIGHT,
    "apply_pressure": ArmId.RIGHT,
    "dual_placement_egg": ArmId.RIGHT,
    "dual_placement_bottle": ArmId.LEFT,
    "tool_interaction": ArmId.RIGHT,
    "grasp_from_table": ArmId.RIGHT,
    "press_button": ArmId.RIGHT,
    "wipe_surface": ArmId.RIGHT,
    "handover": ArmId.RIGHT,
}

# the six rows of the evaluation table, in table order
TABLE_TASKS = ("follow_surface", "apply_pressure", "dual_placement_egg",
               "dual_placement_bottle", "tool_interaction", "grasp_from_table")


@dataclass(frozen=True)
class SurfaceProfile:
    """Height offsets along one horizontal axis, linearly interpolated.

    Arc length is ``direction * (p[axis] - origin)``; outside the sampled
    range the end heights are held.
    """

    arc_length: np.ndarray
    height: np.ndarray
    axis: int = 1
    origin: float = 0.0
    direction: float = -1.0

    def __post_init__(self):
        s = np.asarray(self.arc_length, dtype=float)
        h = np.asarray(self.height, dtype=float)
        if s.ndim != 1 or s.shape != h.shape or s.size < 2:
            raise ValidationError("heightfield needs at least two (arc_length, height) rows",
                                  rule="heightfield")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(h))):
            raise ValidationError("heightfield must be finite", rule="heightfield")
        if np.any(np.diff(s) <= 0):
            raise ValidationError("heightfield arc length must be strictly increasing",
                                  rule="heightfield")
        object.__setattr__(self, "arc_length", s)
        object.__setattr__(self, "height", h)

    def at(self, position):
        s = self.direction * (position[self.axis] - self.origin)
        return float(np.interp(s, self.arc_length, self.height))


def sinusoid_profile(amplitude=0.02, wavelength=0.3, length=0.3, step=0.005, **kw):
    s = np.linspace(0.0, length, int(round(length / step)) + 1)
    return SurfaceProfile(s, amplitude * np.sin(2 * np.pi * s / wavelength), **kw)


def load_heightfield(path, **kw):
    """Read a two-column ``arc_length_m,height_m`` CSV (header optional)."""
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise ParseError("expected two numeric columns", location=f"{path}:{lineno}")
    if not rows:
        raise ParseError("heightfield is empty", location=str(path))
    s, h = zip(*rows)
    return SurfaceProfile(np.array(s), np.array(h), **kw)


@dataclass(frozen=True)
class Environment:
    table_height: float = -0.20
    contact_stiffness: float = 500.0
    contact_damping: float = 5.0
    profile: SurfaceProfile | None = None
    enabled: bool = True

    def __post_init__(self):
        if not self.contact_stiffness > 0 or not math.isfinite(self.contact_stiffness):
            raise ValidationError("contact stiffness must be positive", rule="k_env")
        if not self.contact_damping >= 0:
            raise ValidationError("contact damping must be non-negative", rule="d_env")
        if not math.isfinite(self.table_height):
            raise ValidationError("table height must be finite", rule="heightfield")

    def height_at(self, position):
        z = self.table_height
        if self.profile is not None:
            z += self.profile.at(position)
        return z

    def without_contact(self):
        return replace(self, enabled=False)


def contact_force(env, position, velocity):
    """Unilateral spring-damper push along +z when the point is at or below the surface."""
    out = np.zeros(3)
    if not env.enabled:
        return out
    surface = env.height_at(position)
    if position[2] > surface:
        return out
    fz = env.contact_stiffness * (surface - position[2]) - env.contact_damping * velocity[2]
    out[2] = max(fz, 0.0)
    return out


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.02
    sample_rate: float = SAMPLE_RATE
    right_work_point: tuple = (0.30, -0.15)
    left_work_point: tuple = (0.30, 0.15)
    sweep_speed: float = 0.05
    sweep_length: float = 0.30
    follow_depth: float = 0.001
    press_depth: float = 0.01
    place_depth: float = 0.002
    poke_depth: float = 0.005
    approach_height: float = 0.05
    lift_height: float = 0.15
    dwell: float = 1.0
    press_dwell: float = 4.0
    ik_damping: float = 0.05
    ik_tol: float = 1e-8
    ik_max_iters: int = 200
    right_seed: tuple = (-0.6, 0.0, 0.0, -1.0, 0.0)
    left_seed: tuple = (-0.6, 0.0, 0.0, -1.0, 0.0)
    initial_offset: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValidationError("dt must be positive", rule="dt")
        if not self.sample_rate > 0:
            raise ValidationError("sample_rate must be positive", rule="sample_rate")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown simulation settings {sorted(unknown)}",
                                  rule="unknown field")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**conv)

    def to_dict(self):
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v
                for f in fields(self)}

    def work_point(self, arm):
        return self.right_work_point if ArmId.parse(arm) is ArmId.RIGHT else self.left_work_point

    def seed(self, arm):
        return self.right_seed if ArmId.parse(arm) is ArmId.RIGHT else self.left_seed

    def ik_options(self):
        return IkOptions(self.ik_damping, self.ik_max_iters, self.ik_tol)


@dataclass(frozen=True)
class TrajectorySpec:
    task_id: str
    arm: ArmId
    times: np.ndarray
    positions: np.ndarray
    sample_rate: float = SAMPLE_RATE
    events: tuple = ()

    @property
    def duration(self):
        return float(self.times[-1])

    def sample(self, t):
        """Reference position at time ``t`` (linear between samples, held at the ends)."""
        return np.array([np.interp(t, self.times, self.positions[:, i]) for i in range(3)])


def _min_jerk(tau):
    return tau ** 3 * (10 - 15 * tau + 6 * tau ** 2)


class _Builder:
    """Concatenates timed segments sampled on a uniform grid."""

    def __init__(self, start, rate):
        self.rate = rate
        self.knots = [(0.0, np.asarray(start, float), None)]
        self.events = []

    @property
    def t(self):
        return self.knots[-1][0]

    @property
    def pos(self):
        return self.knots[-1][1]

    def move(self, target, duration, path=None):
        """Min-jerk move to ``target``; ``path(tau)`` overrides the shape if given."""
        self.knots.append((self.t + duration, np.asarray(target, float), path))
        return self

    def dwell(self, duration):
        return self.move(self.pos, duration)

    def event(self, name):
        self.events.append((round(self.t, 9), name))
        return self

    def build(self, task_id, arm):
        n = int(round(self.t * self.rate))
        times = np.arange(n + 1) / self.rate
        out = np.empty((n + 1, 3))
        k = 0
        for t_i, t in enumerate(times):
            while k + 1 < len(self.knots) - 1 and t > self.knots[k + 1][0]:
                k += 1
            t0, p0, _ = self.knots[k]
            t1, p1, path = self.knots[k + 1]
            tau = 0.0 if t1 <= t0 else min(max((t - t0) / (t1 - t0), 0.0), 1.0)
            out[t_i] = path(tau) if path is not None else p0 + (p1 - p0) * _min_jerk(tau)
        return TrajectorySpec(task_id, arm, times, out, self.rate, tuple(self.events))


def _sweep(env, x, y0, y1, z_offset):
    """Constant-speed straight sweep in y that rides ``z_offset`` above the surface."""
    def path(tau):
        y = y0 + (y1 - y0) * tau
        p = np.array([x, y, 0.0])
        p[2] = env.height_at(p) + z_offset
        return p
    return path


def plan_trajectory(task_id, env, cfg=None, arm=None):
    cfg = cfg or SimConfig()
    if task_id not in TASK_ARMS:
        raise UnknownTask(f"unknown task {task_id!r}")
    arm = ArmId.parse(arm) if arm is not None else TASK_ARMS[task_id]
    wx, wy = cfg.work_point(arm)
    zs = env.height_at((wx, wy, 0.0))
    rate = cfg.sample_rate
    half = cfg.sweep_length / 2.0

    if task_id in ("follow_surface", "wipe_surface"):
        y0, y1 = wy + half, wy - half
        start = np.array([wx, y0, 0.0])
        start[2] = env.height_at(start) - cfg.follow_depth
        b = _Builder(start, rate).dwell(cfg.dwell)
        sweep_time = cfg.sweep_length / cfg.sweep_speed
        path = _sweep(env, wx, y0, y1, -cfg.follow_depth)
        b.move(path(1.0), sweep_time, path)
        if task_id == "wipe_surface":
            back = _sweep(env, wx, y1, y0, -cfg.follow_depth)
            b.move(back(1.0), sweep_time, back)
        b.dwell(cfg.dwell)
    elif task_id in ("apply_pressure", "press_button"):
        depth = cfg.press_depth if task_id == "apply_pressure" else cfg.press_depth / 2
        hold = cfg.press_dwell if task_id == "apply_pressure" else cfg.press_dwell / 2
        top = np.array([wx, wy, zs + cfg.approach_height])
        b = _Builder(top, rate).dwell(cfg.dwell / 2)
        b.move([wx, wy, zs - depth], 2.0).dwell(hold).move(top, 2.0).dwell(cfg.dwell / 2)
    elif task_id in ("dual_placement_egg", "dual_placement_bottle"):
        top = np.array([wx, wy, zs + 0.10])
        b = _Builder(top, rate).dwell(cfg.dwell / 2)
        b.move([wx, wy, zs - cfg.place_depth], 3.0).event("open").dwell(cfg.dwell)
        b.move([wx, wy, zs + 0.08], 2.0).dwell(cfg.dwell / 2)
    elif task_id == "tool_interaction":
        top = np.array([wx, wy, zs + cfg.approach_height])
        b = _Builder(top, rate).dwell(cfg.dwell / 2)
        b.move([wx, wy, zs - cfg.poke_depth], 1.0).dwell(0.5).move(top, 1.0).dwell(cfg.dwell)
    elif task_id == "grasp_from_table":
        b = _Builder([wx, wy, zs], rate).dwell(cfg.dwell / 2).event("close").dwell(cfg.dwell / 2)
        b.move([wx, wy, zs + cfg.lift_height], 3.0).dwell(cfg.dwell)
    else:  # handover
        b = _Builder([wx, wy, zs + cfg.approach_height], rate).dwell(cfg.dwell / 2)
        b.move([wx + 0.10, wy, zs + 0.20], 3.0).dwell(cfg.dwell).event("open")
        b.dwell(cfg.dwell / 2)
    return b.build(task_id, arm)


def default_environment(task_id, k_env=500.0, d_env=5.0, table_height=-0.20, cfg=None,
                        profile=None):
    """Flat table, or the irregular surface along the sweep for ``follow_surface``."""
    cfg = cfg or SimConfig()
    if task_id == "follow_surface":
        wy = cfg.work_point(ArmId.RIGHT)[1]
        if profile is None:
            profile = sinusoid_profile(length=cfg.sweep_length)
        profile = replace(profile, axis=1, origin=wy + cfg.sweep_length / 2, direction=-1.0)
    else:
        profile = None
    return Environment(table_height, k_env, d_env, profile)


TRACE_VECTORS = ("x_ref", "x", "e", "edot", "F_virt", "F_env")


@dataclass
class Trace:
    task_id: str
    arm: ArmId
    t: list = field(default_factory=list)
    x_ref: list = field(default_factory=list)
    x: list = field(default_factory=list)
    e: list = field(default_factory=list)
    edot: list = field(default_factory=list)
    F_virt: list = field(default_factory=list)
    F_env: list = field(default_factory=list)
    q: list = field(default_factory=list)

    def __len__(self):
        return len(self.t)

    def append(self, t, x_ref, x, e, edot, f_virt, f_env, q):
        self.t.append(float(t))
        for name, value in zip(TRACE_VECTORS, (x_ref, x, e, edot, f_virt, f_env)):
            getattr(self, name).append(np.array(value, dtype=float))
        self.q.append(np.array(q, dtype=float))

    def array(self, name):
        rows = getattr(self, name)
        if name == "t":
            return np.array(rows)
        width = len(rows[0]) if rows else 3
        return np.array(rows).reshape(len(rows), width)

    def header(self):
        cols = ["t"]
        for name in TRACE_VECTORS:
            cols += [f"{name}_{ax}" for ax in "xyz"]
        n_q = len(self.q[0]) if self.q else 0
        return cols + [f"q_{i}" for i in range(n_q)]

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        for i in range(len(self)):
            row = [self.t[i]]
            for name in TRACE_VECTORS:
                row += list(getattr(self, name)[i])
            row += list(self.q[i])
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def tracking_csv(self):
        """Reference vs measured position per axis, ready for plotting."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "ref_x", "meas_x", "ref_y", "meas_y", "ref_z", "meas_z"])
        for i in range(len(self)):
            row = [self.t[i]]
            for ax in range(3):
                row += [self.x_ref[i][ax], self.x[i][ax]]
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, task_id="", arm=ArmId.RIGHT):
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        n_q = sum(1 for h in header if h.startswith("q_"))
        trace = cls(task_id, ArmId.parse(arm))
        for row in reader:
            vals = [float(v) for v in row]
            vecs = [vals[1 + 3 * i: 4 + 3 * i] for i in range(len(TRACE_VECTORS))]
            trace.append(vals[0], *vecs, vals[len(vals) - n_q:] if n_q else [])
        return trace


@dataclass(frozen=True)
class TaskMetrics:
    mean_abs_e_z: float
    max_abs_e_z: float
    max_abs_F_virt_z: float

    def to_dict(self):
        return {"mean_abs_e_z": self.mean_abs_e_z, "max_abs_e_z": self.max_abs_e_z,
                "max_abs_F_virt_z": self.max_abs_F_virt_z}


def compute_metrics(trace):
    if len(trace) == 0:
        raise EmptyTrace("trace has no samples")
    ez = np.abs(trace.array("e")[:, 2])
    fz = np.abs(trace.array("F_virt")[:, 2])
    return TaskMetrics(float(np.mean(ez)), float(np.max(ez)), float(np.max(fz)))


def _impedance_of(params):
    return params.impedance if hasattr(params, "impedance") else params


def check_stability(params, env, dt):
    """Raise NonFiniteState when the discrete step would amplify the error.

    Checked per axis both free and with the contact spring-damper engaged;
    an amplifying step runs off to non-finite values.
    """
    for axis in range(3):
        m, d, k = params.mass[axis], params.damping[axis], params.stiffness[axis]
        cases = [(d, k)]
        if env.enabled and axis == 2:
            cases.append((d + env.contact_damping, k + env.contact_stiffness))
        for dd, kk in cases:
            if not is_stable_step(m, dd, kk, dt):
                raise NonFiniteState(
                    f"dt={dt} s is unstable for m={m}, d={dd}, k={kk} on axis "
                    f"{'xyz'[axis]}; the integrated state diverges to non-finite values")


def tick_references(traj, dt):
    """Reference position, velocity and feedforward acceleration on the tick grid.

    Velocities are backward differences and accelerations forward differences
    of those, so an error-free state stays on the sampled reference exactly.
    """
    n = int(math.floor(traj.duration / dt + 1e-9))
    ticks = np.arange(n + 1) * dt
    pos = np.stack([traj.sample(t) for t in ticks])
    vel = np.zeros_like(pos)
    vel[1:] = np.diff(pos, axis=0) / dt
    acc = np.zeros_like(pos)
    acc[:-1] = np.diff(vel, axis=0) / dt
    return ticks, pos, vel, acc


def run_scenario(task_id, params, chain, env, cfg=None, trajectory=None):
    """Closed-loop execution of one arm's reference; returns the recorded Trace.

    Raises :class:`SimulationAborted` (carrying the partial trace) on
    NonFiniteState or IK NotConverged.
    """
    cfg = cfg or SimConfig()
    imp = _impedance_of(params)
    arm = getattr(params, "arm", None) or TASK_ARMS.get(task_id, ArmId.RIGHT)
    traj = trajectory or plan_trajectory(task_id, env, cfg, arm)
    trace = Trace(task_id, ArmId.parse(arm))
    dt = cfg.dt
    opts = cfg.ik_options()
    try:
        check_stability(imp, env, dt)
        ticks, ref_pos, ref_vel, ref_acc = tick_references(traj, dt)
        start = ref_pos[0] + np.asarray(cfg.initial_offset, float)
        q = solve_ik_dls(chain, cfg.seed(arm), start, IkOptions(opts.damping, 1000, opts.tol_m))
        state = ImpedanceState(position=forward_kinematics(chain, q).position,
                               velocity=np.zeros(3), reference_position=ref_pos[0],
                               reference_velocity=ref_vel[0])
        for n, t in enumerate(ticks):
            state = state.with_reference(ref_pos[n], ref_vel[n])
            e = state.reference_position - state.position
            edot = state.reference_velocity - state.velocity
            f_env = contact_force(env, state.position, state.velocity)
            f_virt = virtual_force(imp, e, edot).force
            trace.append(t, ref_pos[n], state.position, e, edot, f_virt, f_env, q)
            if n == len(ticks) - 1:
                break
            state = step_impedance(state, imp, f_env, dt, reference_acceleration=ref_acc[n])
            q = solve_ik_dls(chain, q, state.position, opts)
            state = replace(state, position=forward_kinematics(chain, q).position)
    except (NonFiniteState, NotConverged) as exc:
        raise SimulationAborted(exc, trace) from exc
    return trace


def steady_state_force(stiffness, k_env, depth):
    """Series-spring force when the reference sits ``depth`` below a rigid-ish surface."""
    return stiffness * k_env * depth / (stiffness + k_env)


def settled_contact_force(params, env, depth, dt=0.02, duration=10.0):
    """Hold the reference ``depth`` below the surface; return the final |F_virt,z|.

    Starts at rest on the surface and integrates only the impedance filter and
    the contact model (no kinematics).
    """
    imp = _impedance_of(params)
    check_stability(imp, env, dt)
    surface = np.array([0.0, 0.0, env.height_at((0.0, 0.0, 0.0))])
    ref = surface - np.array([0.0, 0.0, depth])
    state = ImpedanceState(surface, np.zeros(3), ref, np.zeros(3))
    for _ in range(int(round(duration / dt))):
        state = step_impedance(state, imp, contact_force(env, state.position, state.velocity), dt)
    e = state.reference_position - state.position
    edot = state.reference_velocity - state.velocity
    return abs(float(virtual_force(imp, e, edot).force[2]))


def manifest(task_id, params, cfg, config_hash, metrics=None):
    data = {"task_id": task_id, "params": _impedance_of(params).to_dict(),
            "sim_config": cfg.to_dict(), "config_hash": config_hash}
    if metrics is not None:
        data["metrics"] = metrics.to_dict()
    return json.dumps(data, indent=2, sort_keys=True) + "\n"
