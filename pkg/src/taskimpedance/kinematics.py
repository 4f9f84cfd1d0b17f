"""Serial revolute chains: forward kinematics, Jacobian and DLS inverse kinematics.

Convention: starting from ``base_pose``, each joint applies its rotation about
its own axis and is then followed by its fixed link transform.  Joint ``i``
therefore sits at the origin of the frame accumulated before its rotation and
the end effector at the frame after the last link.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, NotConverged, ParseError, ValidationError

MAX_JOINTS = 10


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Rotation matrix to unit quaternion (w, x, y, z) with w >= 0."""
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q = q / np.linalg.norm(q)
    return -q if q[0] < 0 else q


def axis_angle_matrix(axis, angle):
    """Rodrigues rotation about a unit axis."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def homogeneous(rotation=None, translation=None):
    T = np.eye(4)
    if rotation is not None:
        T[:3, :3] = rotation
    if translation is not None:
        T[:3, 3] = translation
    return T


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray = field(default=(1.0, 0.0, 0.0, 0.0))

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(-1)
        q = np.array(self.orientation, dtype=float).reshape(-1)
        if p.shape != (3,) or q.shape != (4,):
            raise DimensionMismatch("pose needs a 3-vector position and a quaternion")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValidationError("orientation must be a unit quaternion", rule="orientation")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    @classmethod
    def from_matrix(cls, T):
        return cls(T[:3, 3].copy(), matrix_to_quat(T[:3, :3]))

    def matrix(self):
        return homogeneous(quat_to_matrix(self.orientation), self.position)


@dataclass(frozen=True)
class Joint:
    axis: np.ndarray
    link_translation: np.ndarray
    link_rotation: np.ndarray = field(default=(1.0, 0.0, 0.0, 0.0))
    limits: tuple | None = None

    def __post_init__(self):
        axis = np.array(self.axis, dtype=float)
        if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValidationError("joint axis must be a unit 3-vector", rule="axis")
        trans = np.array(self.link_translation, dtype=float)
        if trans.shape != (3,) or not np.all(np.isfinite(trans)):
            raise ValidationError("link_translation must be a finite 3-vector",
                                  rule="link_translation")
        rot = np.array(self.link_rotation, dtype=float)
        if rot.shape != (4,) or abs(np.linalg.norm(rot) - 1.0) > 1e-9:
            raise ValidationError("link_rotation_quat must be a unit quaternion",
                                  rule="link_rotation_quat")
        if self.limits is not None:
            lo, hi = (float(v) for v in self.limits)
            if not lo < hi:
                raise ValidationError("joint limits must satisfy lower < upper", rule="limits")
            object.__setattr__(self, "limits", (lo, hi))
        for arr in (axis, trans, rot):
            arr.setflags(write=False)
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "link_translation", trans)
        object.__setattr__(self, "link_rotation", rot)

    def link_matrix(self):
        return homogeneous(quat_to_matrix(self.link_rotation), self.link_translation)


@dataclass(frozen=True)
class KinematicChain:
    joints: tuple
    base_pose: Pose = field(default_factory=lambda: Pose(np.zeros(3)))
    name: str = "chain"

    def __post_init__(self):
        joints = tuple(self.joints)
        if not 1 <= len(joints) <= MAX_JOINTS:
            raise ValidationError(f"chain must have 1..{MAX_JOINTS} joints, got {len(joints)}",
                                  rule="joint count")
        object.__setattr__(self, "joints", joints)

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def reach(self):
        """Upper bound on the distance from the first joint to the end effector."""
        return float(sum(np.linalg.norm(j.link_translation) for j in self.joints))

    def lower_limits(self):
        return np.array([j.limits[0] if j.limits else -np.inf for j in self.joints])

    def upper_limits(self):
        return np.array([j.limits[1] if j.limits else np.inf for j in self.joints])

    def has_limits(self):
        return any(j.limits is not None for j in self.joints)

    def to_dict(self):
        joints = []
        for j in self.joints:
            entry = {"axis": j.axis.tolist(), "link_translation": j.link_translation.tolist(),
                     "link_rotation_quat": j.link_rotation.tolist()}
            if j.limits is not None:
                entry["limits"] = list(j.limits)
            joints.append(entry)
        return {"name": self.name,
                "base_pose": {"position": self.base_pose.position.tolist(),
                              "orientation": self.base_pose.orientation.tolist()},
                "joints": joints}


def chain_from_dict(data):
    try:
        base = data.get("base_pose") or {}
        joints = [Joint(axis=j["axis"], link_translation=j["link_translation"],
                        link_rotation=j.get("link_rotation_quat", (1.0, 0.0, 0.0, 0.0)),
                        limits=j.get("limits"))
                  for j in data["joints"]]
        return KinematicChain(
            joints=tuple(joints),
            base_pose=Pose(base.get("position", (0.0, 0.0, 0.0)),
                           base.get("orientation", (1.0, 0.0, 0.0, 0.0))),
            name=data.get("name", "chain"))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed chain description: {exc!r}", rule="schema") from exc


def load_chain(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, location=f"{path}:{exc.lineno}:{exc.colno}") from exc
    return chain_from_dict(data)


def _check_q(chain, q):
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape != (chain.n_joints,):
        raise DimensionMismatch(f"expected {chain.n_joints} joint angles, got {q.size}")
    return q


def _joint_frames(chain, q):
    """World frames before each joint rotation, plus the end-effector frame."""
    T = chain.base_pose.matrix()
    frames = []
    for joint, angle in zip(chain.joints, q):
        frames.append(T)
        T = T @ homogeneous(axis_angle_matrix(joint.axis, angle)) @ joint.link_matrix()
    return frames, T


def forward_kinematics(chain, q):
    q = _check_q(chain, q)
    _, T = _joint_frames(chain, q)
    return Pose.from_matrix(T)


def translational_jacobian(chain, q):
    q = _check_q(chain, q)
    return _jacobian(chain, *_joint_frames(chain, q))


def _jacobian(chain, frames, T):
    p_end = T[:3, 3]
    J = np.empty((3, chain.n_joints))
    for i, (frame, joint) in enumerate(zip(frames, chain.joints)):
        axis_world = frame[:3, :3] @ joint.axis
        J[:, i] = np.cross(axis_world, p_end - frame[:3, 3])
    return J


@dataclass(frozen=True)
class IkOptions:
    damping: float = 0.05
    max_iters: int = 200
    tol_m: float = 1e-5

    def __post_init__(self):
        if not self.damping > 0:
            raise ValueError("IK damping must be positive")
        if not self.tol_m > 0:
            raise ValueError("IK tolerance must be positive")


def solve_ik_dls(chain, q0, target, opts=None):
    """Position-only damped least squares IK.

    Iterates ``dq = J^T (J J^T + lambda^2 I)^-1 dx`` until the position
    residual drops below ``opts.tol_m``; joint limits, when configured, are
    enforced by clamping each iterate.  Raises :class:`NotConverged` carrying
    the best iterate and its residual.
    """
    opts = opts or IkOptions()
    q = _check_q(chain, q0).copy()
    target_pos = np.asarray(target.position if isinstance(target, Pose) else target, float)
    lo, hi = chain.lower_limits(), chain.upper_limits()
    limited = chain.has_limits()
    lam2 = opts.damping ** 2
    best_q, best_res = q.copy(), np.inf
    for _ in range(opts.max_iters + 1):
        frames, T = _joint_frames(chain, q)
        dx = target_pos - T[:3, 3]
        res = float(np.linalg.norm(dx))
        if res < best_res:
            best_q, best_res = q.copy(), res
        if res <= opts.tol_m:
            return q
        J = _jacobian(chain, frames, T)
        q = q + J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(3), dx)
        if limited:
            q = np.clip(q, lo, hi)
    raise NotConverged(f"IK did not converge after {opts.max_iters} iterations "
                       f"(residual {best_res:.3g} m)", q=best_q, residual=best_res)
