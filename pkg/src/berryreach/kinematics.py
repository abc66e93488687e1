"""Serial-arm kinematics: forward chain, Jacobian, damped-least-squares IK.

The arm is a generic 6R chain. Joint i rotates about the local z axis of the
frame produced by the previous link; each link then applies a fixed transform
(translate by ``offset`` in the current frame, then rotate by ``rotation_angle``
about a principal axis). The distal link carries a single 90-degree bend so
that useful tool poses keep the wrist away from the aligned-axis singularity.

A joint configuration is a plain ``numpy.ndarray`` of 6 angles in radians.
The tool frame z axis is both the tip-camera optical axis and the gripper
centerline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .transforms import (
    axis_rotation,
    matrix_to_quat,
    matrix_to_rotvec,
    quat_mul,
    quat_normalize,
    quat_to_matrix,
    rot_z,
)

logger = logging.getLogger(__name__)

JointConfig = np.ndarray  # shape (6,), radians


class WorkspaceLimitError(RuntimeError):
    """Raised when joint/velocity clamping persistently blocks tool motion."""


@dataclass(frozen=True)
class Pose:
    """Rigid pose: position in meters plus unit quaternion (w, x, y, z)."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(
            self, "orientation", quat_normalize(np.asarray(self.orientation, dtype=float))
        )

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, position: np.ndarray) -> "Pose":
        return cls(position=np.asarray(position, dtype=float), orientation=matrix_to_quat(rotation))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(position=np.zeros(3), orientation=np.array([1.0, 0.0, 0.0, 0.0]))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def transform_point(self, point: np.ndarray) -> np.ndarray:
        return self.rotation_matrix() @ np.asarray(point, dtype=float) + self.position

    def inverse_transform_point(self, point: np.ndarray) -> np.ndarray:
        return self.rotation_matrix().T @ (np.asarray(point, dtype=float) - self.position)

    def compose(self, other: "Pose") -> "Pose":
        """This pose followed by ``other`` expressed in this pose's frame."""
        r = self.rotation_matrix()
        return Pose(
            position=self.position + r @ other.position,
            orientation=quat_normalize(quat_mul(self.orientation, other.orientation)),
        )

    def z_axis(self) -> np.ndarray:
        return self.rotation_matrix()[:, 2]


@dataclass(frozen=True)
class LinkGeometry:
    """Fixed transform from one joint frame to the next.

    ``offset`` is the translation in the post-joint-rotation frame (meters);
    the link then rotates the frame by ``rotation_angle`` about
    ``rotation_axis``. A right-angle distal bend is encoded as a single
    rotation of exactly +/- pi/2.
    """

    offset: tuple[float, float, float]
    rotation_axis: str = "x"
    rotation_angle: float = 0.0

    @cached_property
    def offset_vec(self) -> np.ndarray:
        return np.array(self.offset, dtype=float)

    @cached_property
    def rotation(self) -> np.ndarray:
        return axis_rotation(self.rotation_axis, self.rotation_angle)


@dataclass(frozen=True)
class ArmModel:
    """6R arm description plus the collision and velocity envelope."""

    links: tuple[LinkGeometry, ...]
    joint_limits: np.ndarray  # (6, 2) radians
    base_pose: Pose
    capsule_radii: np.ndarray = field(
        default_factory=lambda: np.array([0.045, 0.040, 0.035, 0.015, 0.018])
    )
    gripper_length: float = 0.04
    capture_offset: float = 0.035
    max_joint_velocity: float = 1.0  # rad/s per joint
    max_tool_speed: float = 0.1  # m/s at the tool point

    def __post_init__(self) -> None:
        object.__setattr__(self, "joint_limits", np.asarray(self.joint_limits, dtype=float))
        object.__setattr__(self, "capsule_radii", np.asarray(self.capsule_radii, dtype=float))
        if len(self.links) != 6:
            raise ValueError("arm model requires exactly 6 links")
        if self.joint_limits.shape != (6, 2):
            raise ValueError("joint_limits must have shape (6, 2)")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise ValueError("each joint limit must satisfy lower < upper")
        if np.any(self.capsule_radii <= 0.0):
            raise ValueError("collision capsule radii must be positive")
        distal = self.links[-1]
        if abs(abs(distal.rotation_angle) - np.pi / 2.0) > 1e-9:
            raise ValueError("distal link must encode exactly one right-angle bend")
        if np.linalg.norm(distal.offset_vec) <= 0.0:
            raise ValueError("distal link length must be positive")

    @cached_property
    def _link_rotations(self) -> tuple[np.ndarray, ...]:
        return tuple(link.rotation for link in self.links)

    @cached_property
    def _link_offsets(self) -> tuple[np.ndarray, ...]:
        return tuple(link.offset_vec for link in self.links)

    def within_limits(self, q: JointConfig) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(
            np.all(q >= self.joint_limits[:, 0] - 1e-9)
            and np.all(q <= self.joint_limits[:, 1] + 1e-9)
        )

    def clamp_to_limits(self, q: JointConfig) -> JointConfig:
        return np.clip(np.asarray(q, dtype=float), self.joint_limits[:, 0], self.joint_limits[:, 1])

    def shoulder_position(self) -> np.ndarray:
        """World position of the joint-2 origin at any configuration.

        Joint 1 is the vertical base axis, so the shoulder height is
        configuration independent.
        """
        r = self.base_pose.rotation_matrix()
        return self.base_pose.position + r @ self._link_offsets[0]


def default_arm(
    base_position: tuple[float, float, float] = (0.0, 0.0, 0.12),
    capsule_radii: np.ndarray | None = None,
) -> ArmModel:
    """Arm used throughout: 0.10 m riser, 0.20 + 0.16 m arm links and an
    0.08 m distal link with one 90-degree bend (total reach ~0.44 m)."""
    links = (
        LinkGeometry(offset=(0.0, 0.0, 0.10), rotation_axis="x", rotation_angle=-np.pi / 2),
        LinkGeometry(offset=(0.20, 0.0, 0.0)),
        LinkGeometry(offset=(0.16, 0.0, 0.0), rotation_axis="y", rotation_angle=np.pi / 2),
        LinkGeometry(offset=(0.0, 0.0, 0.0), rotation_axis="y", rotation_angle=-np.pi / 2),
        LinkGeometry(offset=(0.0, 0.0, 0.0), rotation_axis="y", rotation_angle=np.pi / 2),
        LinkGeometry(offset=(0.0, -0.08, 0.0), rotation_axis="x", rotation_angle=np.pi / 2),
    )
    deg = np.pi / 180.0
    limits = np.array(
        [
            [-170.0, 170.0],
            [-120.0, 120.0],
            [-170.0, 170.0],
            [-170.0, 170.0],
            [-120.0, 120.0],
            [-170.0, 170.0],
        ]
    ) * deg
    kwargs = {}
    if capsule_radii is not None:
        kwargs["capsule_radii"] = np.asarray(capsule_radii, dtype=float)
    return ArmModel(
        links=links,
        joint_limits=limits,
        base_pose=Pose(position=np.array(base_position), orientation=np.array([1.0, 0.0, 0.0, 0.0])),
        **kwargs,
    )


def fk_chain(model: ArmModel, q: JointConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One pass over the chain.

    Returns (joint_origins (6,3), joint_axes (6,3), tool rotation (3,3),
    tool position (3,)). Row i of the origin/axis arrays describes joint i+1's
    rotation axis in world coordinates.
    """
    q = np.asarray(q, dtype=float)
    r = model.base_pose.rotation_matrix()
    p = model.base_pose.position.copy()
    origins = np.empty((6, 3))
    axes = np.empty((6, 3))
    offsets = model._link_offsets
    rotations = model._link_rotations
    for i in range(6):
        origins[i] = p
        axes[i] = r[:, 2]
        r = r @ rot_z(q[i])
        p = p + r @ offsets[i]
        r = r @ rotations[i]
    return origins, axes, r, p


def forward_kinematics(model: ArmModel, q: JointConfig) -> Pose:
    """World pose of the tool frame for a joint configuration."""
    _, _, r, p = fk_chain(model, q)
    return Pose.from_matrix(r, p)


def collision_segments(model: ArmModel, q: JointConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Capsule segments (p0 (5,3), p1 (5,3), radii (5,)) covering the arm.

    Segments: riser, upper arm, forearm, distal link, gripper. Zero-length
    wrist links are collapsed into the forearm segment.
    """
    origins, _, r_tool, p_tool = fk_chain(model, q)
    base = model.base_pose.position
    shoulder = origins[1]
    elbow = origins[2]
    wrist = origins[3]
    tip = p_tool + model.gripper_length * r_tool[:, 2]
    p0 = np.array([base, shoulder, elbow, wrist, p_tool])
    p1 = np.array([shoulder, elbow, wrist, p_tool, tip])
    return p0, p1, model.capsule_radii


def jacobian(model: ArmModel, q: JointConfig) -> np.ndarray:
    """6x6 spatial Jacobian at the tool point, rows [linear; angular].

    Column i is the world-frame tool twist produced by unit velocity on
    joint i+1.
    """
    origins, axes, _, p_tool = fk_chain(model, q)
    lin = np.cross(axes, p_tool - origins)
    return np.vstack([lin.T, axes.T])


_DLS_LAMBDA = 0.05
_IK_MAX_ITERS = 200
_IK_STEP_CLAMP = 0.2
_IK_POS_TOL = 1e-4
_IK_ROT_TOL = 1e-3


def inverse_kinematics(
    model: ArmModel,
    target: Pose,
    seed: JointConfig,
    max_iters: int = _IK_MAX_ITERS,
    pos_tol: float = _IK_POS_TOL,
    rot_tol: float = _IK_ROT_TOL,
) -> JointConfig | None:
    """Damped-least-squares IK. Returns None when convergence fails.

    Deterministic: same inputs give the same iterate sequence. The returned
    configuration is always within joint limits.
    """
    q = model.clamp_to_limits(seed)
    r_target = target.rotation_matrix()
    p_target = target.position
    damping = _DLS_LAMBDA**2 * np.eye(6)
    for _ in range(max_iters):
        origins, axes, r, p = fk_chain(model, q)
        e_pos = p_target - p
        e_rot = matrix_to_rotvec(r_target @ r.T)
        if np.linalg.norm(e_pos) <= pos_tol and np.linalg.norm(e_rot) <= rot_tol:
            return q
        lin = np.cross(axes, p - origins)
        j = np.vstack([lin.T, axes.T])
        e = np.concatenate([e_pos, e_rot])
        dq = j.T @ np.linalg.solve(j @ j.T + damping, e)
        dq = np.clip(dq, -_IK_STEP_CLAMP, _IK_STEP_CLAMP)
        q = model.clamp_to_limits(q + dq)
    return None


def cartesian_velocity_step(
    model: ArmModel, q: JointConfig, twist: np.ndarray, dt: float
) -> tuple[JointConfig, float]:
    """Advance the configuration one step toward a world-frame tool twist.

    The twist is [vx, vy, vz, wx, wy, wz]. The linear part is capped at the
    model's tool speed, joint velocities at the per-joint cap, and the result
    is clamped to joint limits. Returns (next config, achieved fraction of
    the requested tool motion).
    """
    q = np.asarray(q, dtype=float)
    twist = np.asarray(twist, dtype=float).copy()
    speed = np.linalg.norm(twist[:3])
    if speed > model.max_tool_speed:
        twist *= model.max_tool_speed / speed
    j = jacobian(model, q)
    dq_dt = j.T @ np.linalg.solve(j @ j.T + _DLS_LAMBDA**2 * np.eye(6), twist)
    dq_dt = np.clip(dq_dt, -model.max_joint_velocity, model.max_joint_velocity)
    q_next = model.clamp_to_limits(q + dq_dt * dt)
    requested = np.linalg.norm(twist[:3]) if np.linalg.norm(twist[:3]) > 1e-12 else np.linalg.norm(twist[3:])
    if requested <= 1e-12:
        return q_next, 1.0
    achieved_twist = j @ ((q_next - q) / dt)
    achieved = (
        np.linalg.norm(achieved_twist[:3])
        if np.linalg.norm(twist[:3]) > 1e-12
        else np.linalg.norm(achieved_twist[3:])
    )
    return q_next, float(achieved / requested)


class CartesianVelocityController:
    """Stateful wrapper around cartesian_velocity_step.

    Raises WorkspaceLimitError after ``consecutive_limit`` successive steps in
    which clamping removed at least half of the requested tool motion.
    """

    def __init__(self, model: ArmModel, consecutive_limit: int = 10):
        self.model = model
        self.consecutive_limit = int(consecutive_limit)
        self._clamped_steps = 0

    def reset(self) -> None:
        self._clamped_steps = 0

    def step(self, q: JointConfig, twist: np.ndarray, dt: float) -> JointConfig:
        q_next, fraction = cartesian_velocity_step(self.model, q, twist, dt)
        if fraction < 0.5:
            self._clamped_steps += 1
        else:
            self._clamped_steps = 0
        if self._clamped_steps >= self.consecutive_limit:
            raise WorkspaceLimitError(
                f"tool motion clamped below 50% for {self._clamped_steps} consecutive steps"
            )
        return q_next


def _matches_default_topology(model: ArmModel) -> bool:
    """True when the chain follows the packaged layout (riser, two planar
    links, spherical-ish wrist, bent distal link), which admits closed-form
    branch enumeration."""
    l = model.links
    checks = [
        l[0].rotation_axis == "x" and abs(l[0].rotation_angle + np.pi / 2) < 1e-9,
        np.allclose(l[0].offset_vec[:2], 0.0) and l[0].offset_vec[2] > 0.0,
        abs(l[1].rotation_angle) < 1e-9 and l[1].offset_vec[0] > 0.0,
        np.allclose(l[1].offset_vec[1:], 0.0),
        l[2].rotation_axis == "y" and abs(l[2].rotation_angle - np.pi / 2) < 1e-9,
        l[2].offset_vec[0] > 0.0 and np.allclose(l[2].offset_vec[1:], 0.0),
        np.allclose(l[3].offset_vec, 0.0) and np.allclose(l[4].offset_vec, 0.0),
        l[3].rotation_axis == "y" and abs(l[3].rotation_angle + np.pi / 2) < 1e-9,
        l[4].rotation_axis == "y" and abs(l[4].rotation_angle - np.pi / 2) < 1e-9,
        l[5].rotation_axis == "x" and abs(l[5].rotation_angle - np.pi / 2) < 1e-9,
        np.allclose(l[5].offset_vec[[0, 2]], 0.0) and l[5].offset_vec[1] < 0.0,
    ]
    return all(checks)


def _analytic_branches(model: ArmModel, target: Pose) -> list[JointConfig]:
    """Closed-form candidate configurations for the packaged chain topology.

    Enumerates base-flip x elbow x wrist branches (up to 8). Candidates are
    exact solutions ignoring joint limits; callers polish them with DLS.
    Returns [] when the chain topology differs or the wrist point is out of
    planar reach.
    """
    if not _matches_default_topology(model):
        return []
    r_base = model.base_pose.rotation_matrix()
    r_t = r_base.T @ target.rotation_matrix()
    p_t = r_base.T @ (target.position - model.base_pose.position)
    riser = model.links[0].offset_vec[2]
    a = model.links[1].offset_vec[0]
    b = model.links[2].offset_vec[0]
    distal = -model.links[5].offset_vec[1]
    wrist = p_t - distal * r_t[:, 2]
    r_f6 = r_t @ model.links[5].rotation.T
    branches: list[JointConfig] = []
    for flip in (0.0, np.pi):
        q1 = np.arctan2(wrist[1], wrist[0]) + flip
        q1 = (q1 + np.pi) % (2.0 * np.pi) - np.pi
        rho = np.hypot(wrist[0], wrist[1]) * (1.0 if flip == 0.0 else -1.0)
        u, v = rho, wrist[2] - riser
        cos_beta = (u * u + v * v - a * a - b * b) / (2.0 * a * b)
        if abs(cos_beta) > 1.0 + 1e-12:
            continue
        cos_beta = np.clip(cos_beta, -1.0, 1.0)
        for elbow in (1.0, -1.0):
            beta = elbow * np.arccos(cos_beta)
            alpha = np.arctan2(v, u) - np.arctan2(b * np.sin(beta), a + b * np.cos(beta))
            q2 = -((alpha + np.pi) % (2.0 * np.pi) - np.pi)
            q3 = -beta
            partial = np.eye(3)
            for i, qi in enumerate((q1, q2, q3)):
                partial = partial @ rot_z(qi) @ model._link_rotations[i]
            m = partial.T @ r_f6
            cos_g = np.clip(m[2, 2], -1.0, 1.0)
            for wrist_sign in (1.0, -1.0):
                g = wrist_sign * np.arccos(cos_g)
                sg = np.sin(g)
                if abs(sg) < 1e-8:
                    q4, q6 = 0.0, np.arctan2(m[1, 0], m[0, 0])
                else:
                    q4 = np.arctan2(m[0, 2] / sg, -m[1, 2] / sg)
                    q6 = np.arctan2(m[2, 0] / sg, m[2, 1] / sg)
                branches.append(np.array([q1, q2, q3, q4, -g, q6]))
                if abs(sg) < 1e-8:
                    break
    return branches


def solve_ik(
    model: ArmModel, target: Pose, seed: JointConfig | None = None
) -> JointConfig | None:
    """IK with deterministic restarts: closed-form branch seeds (when the
    chain topology allows) plus a heuristic seed ladder, each polished by
    inverse_kinematics. Returns None when every start fails."""
    seeds: list[JointConfig] = []
    if seed is not None:
        seeds.append(model.clamp_to_limits(seed))
    branches = _analytic_branches(model, target)
    in_limits = [br for br in branches if model.within_limits(br)]
    out_limits = [model.clamp_to_limits(br) for br in branches if not model.within_limits(br)]
    seeds.extend(in_limits)
    seeds.extend(_workspace_seeds(model, target.position))
    seeds.extend(out_limits)
    for s in seeds:
        solution = inverse_kinematics(model, target, s)
        if solution is not None:
            return solution
    return None


def _orientation_sample_directions() -> np.ndarray:
    """The 26 unit directions given by nonzero sign patterns on a 3-cube."""
    dirs = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                v = np.array([dx, dy, dz], dtype=float)
                dirs.append(v / np.linalg.norm(v))
    return np.array(dirs)


_ORIENTATION_DIRECTIONS = _orientation_sample_directions()


def _workspace_seeds(model: ArmModel, point: np.ndarray) -> list[JointConfig]:
    rel = model.base_pose.inverse_transform_point(point)
    azimuth = float(np.arctan2(rel[1], rel[0]))
    return [
        model.clamp_to_limits(np.array([azimuth, -0.5, 0.9, 0.0, 0.9, 0.0])),
        model.clamp_to_limits(np.array([azimuth, 0.3, -0.9, 0.0, -0.9, 0.0])),
        np.zeros(6),
    ]

def in_workspace(model: ArmModel, point: np.ndarray, max_iters: int = 120) -> bool:
    """True iff IK reaches the point for at least one orientation drawn from
    the fixed 26-direction tool-axis sampling set."""
    from .transforms import orthonormal_basis_from_z

    point = np.asarray(point, dtype=float)
    seeds = _workspace_seeds(model, point)
    # try directions pointing away from the base first: those are the
    # natural reaching orientations and give an early exit
    outward = point - model.base_pose.position
    norm = np.linalg.norm(outward)
    order = np.arange(len(_ORIENTATION_DIRECTIONS))
    if norm > 1e-9:
        scores = _ORIENTATION_DIRECTIONS @ (outward / norm)
        order = np.argsort(-scores)
    for idx in order:
        target = Pose.from_matrix(
            orthonormal_basis_from_z(_ORIENTATION_DIRECTIONS[idx]), point
        )
        for branch in _analytic_branches(model, target):
            if model.within_limits(branch):
                if inverse_kinematics(model, target, branch, max_iters=max_iters) is not None:
                    return True
        for seed in seeds:
            if inverse_kinematics(model, target, seed, max_iters=max_iters) is not None:
                return True
    return False
