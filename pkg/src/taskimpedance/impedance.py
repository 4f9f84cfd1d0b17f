"""Translational cartesian impedance: error, virtual force and integration.

Each arm's end effector is a point mass-spring-damper attached to a moving
reference.  The virtual force ``F = K e + D edot`` is the sensorless proxy for
contact force; rotations are carried along but not regulated.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonFiniteState, ValidationError

DEFAULT_MASS = (1.0, 1.0, 1.0)
IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


class ArmId(str, enum.Enum):
    LEFT = "L"
    RIGHT = "R"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper()
        for arm in cls:
            if key in (arm.value, arm.name):
                return arm
        raise ValidationError(f"unknown arm {value!r}, expected 'L' or 'R'", rule="arm")


def _frozen_vec(values, name, size=3):
    arr = np.array(values, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise ValidationError(f"{name} must have {size} components, got {arr.size}", rule=name)
    arr.setflags(write=False)
    return arr


def _unit_quat(values, name="orientation"):
    q = _frozen_vec(values, name, size=4)
    if not np.all(np.isfinite(q)) or abs(np.linalg.norm(q) - 1.0) > 1e-9:
        raise ValidationError(f"{name} must be a unit quaternion", rule=name)
    return q


@dataclass(frozen=True)
class ImpedanceParams:
    """Diagonals of the virtual mass, damping and stiffness matrices."""

    mass: np.ndarray
    damping: np.ndarray
    stiffness: np.ndarray

    def __post_init__(self):
        for name in ("mass", "damping", "stiffness"):
            vec = _frozen_vec(getattr(self, name), name)
            if not np.all(np.isfinite(vec)) or np.any(vec <= 0.0):
                raise ValidationError(f"{name} must be strictly positive and finite", rule=name)
            object.__setattr__(self, name, vec)

    @classmethod
    def from_gains(cls, stiffness, damping, mass=DEFAULT_MASS):
        """Build from stiffness/damping given as 3-vectors or as a single z-axis value.

        A scalar is broadcast to all three axes (lateral gains default to the
        normal-direction gain).
        """
        return cls(mass=np.broadcast_to(np.asarray(mass, float), 3),
                   damping=np.broadcast_to(np.asarray(damping, float), 3),
                   stiffness=np.broadcast_to(np.asarray(stiffness, float), 3))

    def to_dict(self):
        return {"mass": self.mass.tolist(), "damping": self.damping.tolist(),
                "stiffness": self.stiffness.tolist()}


@dataclass(frozen=True)
class ImpedanceState:
    position: np.ndarray
    velocity: np.ndarray
    reference_position: np.ndarray
    reference_velocity: np.ndarray
    orientation: np.ndarray = field(default=IDENTITY_QUAT)
    reference_orientation: np.ndarray = field(default=IDENTITY_QUAT)
    time: float = 0.0

    def __post_init__(self):
        for name in ("position", "velocity", "reference_position", "reference_velocity"):
            vec = _frozen_vec(getattr(self, name), name)
            if not np.all(np.isfinite(vec)):
                raise NonFiniteState(f"{name} is not finite: {vec.tolist()}")
            object.__setattr__(self, name, vec)
        object.__setattr__(self, "orientation", _unit_quat(self.orientation))
        object.__setattr__(self, "reference_orientation",
                           _unit_quat(self.reference_orientation, "reference_orientation"))
        if not math.isfinite(self.time):
            raise NonFiniteState("time is not finite")

    @classmethod
    def at_rest(cls, position, time=0.0):
        """State resting exactly on a stationary reference."""
        return cls(position=position, velocity=np.zeros(3),
                   reference_position=position, reference_velocity=np.zeros(3), time=time)

    def with_reference(self, position, velocity):
        return replace(self, reference_position=position, reference_velocity=velocity)


@dataclass(frozen=True)
class VirtualForce:
    force: np.ndarray

    def __post_init__(self):
        vec = _frozen_vec(self.force, "force")
        if not np.all(np.isfinite(vec)):
            raise NonFiniteState(f"virtual force is not finite: {vec.tolist()}")
        object.__setattr__(self, "force", vec)


def translational_error(state):
    """Return ``(e, edot)`` with ``e = x_ref - x`` and ``edot = xdot_ref - xdot``."""
    return (state.reference_position - state.position,
            state.reference_velocity - state.velocity)


def virtual_force(params, error, error_rate):
    error = np.asarray(error, dtype=float)
    error_rate = np.asarray(error_rate, dtype=float)
    return VirtualForce(params.stiffness * error + params.damping * error_rate)


def step_impedance(state, params, external_force, dt, reference_acceleration=None):
    """Advance one semi-implicit Euler step of ``M xddot = F_virt + F_ext``.

    ``F_virt`` is evaluated on the pre-step error.  The optional
    ``reference_acceleration`` is a feedforward term; with it the error obeys
    ``M eddot + D edot + K e = -F_ext`` even for an accelerating reference.
    Without it (stationary reference) the plain form above is integrated.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    e, edot = translational_error(state)
    force = params.stiffness * e + params.damping * edot + np.asarray(external_force, float)
    accel = force / params.mass
    if reference_acceleration is not None:
        accel = accel + np.asarray(reference_acceleration, float)
    velocity = state.velocity + dt * accel
    position = state.position + dt * velocity
    if not (np.all(np.isfinite(velocity)) and np.all(np.isfinite(position))):
        raise NonFiniteState(
            f"integration diverged at t={state.time + dt:.4g}s; dt={dt} is unstable for "
            f"stiffness={params.stiffness.tolist()}")
    return replace(state, position=position, velocity=velocity,
                   orientation=state.reference_orientation, time=state.time + dt)


def _scalar_free_response(m, d, k, e0, v0, t):
    a = -d / (2.0 * m)
    disc = d * d - 4.0 * m * k
    if abs(disc) <= 1e-12 * (d * d + 4.0 * m * k):
        return (e0 + (v0 - a * e0) * t) * np.exp(a * t)
    if disc > 0:
        s = math.sqrt(disc) / (2.0 * m)
        r1, r2 = a + s, a - s
        c2 = (v0 - r1 * e0) / (r2 - r1)
        c1 = e0 - c2
        return c1 * np.exp(r1 * t) + c2 * np.exp(r2 * t)
    w = math.sqrt(-disc) / (2.0 * m)
    return np.exp(a * t) * (e0 * np.cos(w * t) + (v0 - a * e0) / w * np.sin(w * t))


def analytic_free_response(params, e0, edot0, t):
    """Closed-form error of ``m eddot + d edot + k e = 0`` per axis.

    ``t`` may be a scalar (returns a 3-vector) or an array of times (returns
    an ``(len(t), 3)`` array).
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("t must be non-negative")
    e0 = np.asarray(e0, dtype=float)
    edot0 = np.asarray(edot0, dtype=float)
    cols = [_scalar_free_response(params.mass[i], params.damping[i], params.stiffness[i],
                                  e0[i], edot0[i], t_arr) for i in range(3)]
    out = np.stack(cols, axis=-1)
    if t_arr.ndim == 0:
        # exact initial condition regardless of branch round-off
        return np.where(t_arr == 0.0, e0, out)
    out[t_arr == 0.0] = e0
    return out


def step_matrix(mass, damping, stiffness, dt):
    """Per-axis semi-implicit Euler transition matrix acting on ``(e, edot)``."""
    a = dt * stiffness / mass
    b = dt * damping / mass
    # edot' = edot - a e - b edot ; e' = e + dt edot'
    return np.array([[1.0 - dt * a, dt * (1.0 - b)],
                     [-a, 1.0 - b]])


def is_stable_step(mass, damping, stiffness, dt):
    """True if the discrete free response does not grow (spectral radius <= 1)."""
    rho = max(abs(np.linalg.eigvals(step_matrix(mass, damping, stiffness, dt))))
    return rho <= 1.0 + 1e-12
