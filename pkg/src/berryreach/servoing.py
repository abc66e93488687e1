"""Reach-episode state machine and image-space PID visual servoing.

The pipeline runs one berry-reach episode: a fixed base camera scans for
berries and back-projects a depth sample into a 3-D target estimate, the
planner moves the arm to a stand-off pose on the calibrated approach line,
and an eye-in-hand camera then drives the final approach by centering the
berry's bounding box and moving along the optical axis until the box fills
a configured fraction of the image.

Conventions: all control runs at a fixed 30 Hz tick. Pixel errors are
measured from the image center, +u right / +v down. Because the tip camera
x-axis maps to +u, a *positive* lateral tool velocity along camera x drives
a positive u-error toward zero; the controller therefore applies
``+gain * error`` in the tool frame (see ``pid_step``/``servo_tick``).
Simulated episode time is ``ticks / 30 Hz`` plus, for each planned joint
motion, its joint-space path length divided by the joint velocity cap.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import sensing
from .kinematics import (
    ArmModel,
    CartesianVelocityController,
    Pose,
    WorkspaceLimitError,
    forward_kinematics,
)
from .planning import (
    MIN_STANDOFF,
    ApproachCalibration,
    COLLISION_MARGIN,
    DegenerateGeometry,
    LocalSearchParams,
    PlanFailure,
    PlanFailureReason,
    _segment_disk_distance,
    _segment_segment_distance,
    check_collision,
    compute_initial_pose,
    default_calibration,
    local_search_sequence,
    plan_motion,
)
from .scene import Capsule, ConfigError, Disk, FoliageObstacle, Scene
from .sensing import (
    BASE_INTRINSICS,
    TIP_INTRINSICS,
    CameraIntrinsics,
    DepthNoiseModel,
    Detection,
    DetectorParams,
    LightingCondition,
    make_base_view,
    make_tip_view,
    select_target,
)

DT = 1.0 / 30.0
GRIPPER_HALF_STROKE = 0.02  # m, lateral capture half-width of the gripper
DEFAULT_BERRY_RADIUS = 0.015

# Parked start configuration: arm folded up against the mast (max radial
# extent ~0.20 m including capsule radii), clear of the 0.30-0.45 m
# planting band in every packaged scenario.
STOW_CONFIG = np.array([0.0, -1.3, 2.4, 0.0, -0.6, 0.0])


class InvalidThreshold(ValueError):
    """Stop threshold outside (0, 1) or demanding a stop inside the berry."""


# ---------------------------------------------------------------------------
# failure taxonomy


class FailureMode(Enum):
    TARGET_OCCLUSION = "TargetOcclusion"
    ENVIRONMENT_COLLISION = "EnvironmentCollision"
    WORKSPACE_LIMIT = "WorkspaceLimit"
    PLANNING_FAILURE = "PlanningFailure"
    DETECTION_FAILURE = "DetectionFailure"
    FOREIGN_OBJECT_IN_GRIP = "ForeignObjectInGrip"
    WRONG_TARGET = "WrongTarget"


# When several causes co-occur in one trial the earliest entry wins.
FAILURE_PRECEDENCE: tuple[FailureMode, ...] = (
    FailureMode.ENVIRONMENT_COLLISION,
    FailureMode.TARGET_OCCLUSION,
    FailureMode.WORKSPACE_LIMIT,
    FailureMode.PLANNING_FAILURE,
    FailureMode.WRONG_TARGET,
    FailureMode.FOREIGN_OBJECT_IN_GRIP,
    FailureMode.DETECTION_FAILURE,
)


def dominant_failure(causes) -> FailureMode:
    """Single mode for a failed trial: highest-precedence recorded cause."""
    causes = list(causes)
    if not causes:
        raise ValueError("a failed trial must record at least one cause")
    return min(causes, key=FAILURE_PRECEDENCE.index)


# ---------------------------------------------------------------------------
# states


class ServoState(Enum):
    SCAN_BASE = "ScanBase"
    COMPUTE_POSE = "ComputePose"
    MOVE_TO_POSE = "MoveToPose"
    LOCAL_SEARCH = "LocalSearch"
    CENTER = "Center"
    APPROACH = "Approach"
    CREEP_FORWARD = "CreepForward"
    REACHED = "Reached"
    FAILED = "Failed"


_SERVO_STATES = (ServoState.CENTER, ServoState.APPROACH, ServoState.CREEP_FORWARD)

# Legal state-change edges (self-loops are not transitions). Used by the
# trial-log replay validator.
TRANSITIONS: dict[ServoState, frozenset[ServoState]] = {
    ServoState.SCAN_BASE: frozenset({ServoState.COMPUTE_POSE, ServoState.FAILED}),
    ServoState.COMPUTE_POSE: frozenset({ServoState.MOVE_TO_POSE, ServoState.FAILED}),
    ServoState.MOVE_TO_POSE: frozenset(
        {ServoState.LOCAL_SEARCH, ServoState.CENTER, ServoState.FAILED}
    ),
    ServoState.LOCAL_SEARCH: frozenset({ServoState.CENTER, ServoState.FAILED}),
    ServoState.CENTER: frozenset(
        {ServoState.APPROACH, ServoState.CREEP_FORWARD, ServoState.REACHED, ServoState.FAILED}
    ),
    ServoState.APPROACH: frozenset(
        {ServoState.CENTER, ServoState.CREEP_FORWARD, ServoState.REACHED, ServoState.FAILED}
    ),
    ServoState.CREEP_FORWARD: frozenset(
        {ServoState.CENTER, ServoState.REACHED, ServoState.FAILED}
    ),
    ServoState.REACHED: frozenset(),
    ServoState.FAILED: frozenset(),
}


# ---------------------------------------------------------------------------
# PID controller


@dataclass(frozen=True, eq=False)
class PidState:
    """Per-axis image-space PID with clamping anti-windup.

    Gains convert pixel errors to lateral tool speed (m/s per px). The raw
    error integral (px*s) is clamped to ``integral_limit`` immediately after
    every update; with the default gains the limit bounds the integral term's
    speed contribution at ``ki * integral_limit`` = 0.05 m/s.
    """

    kp: float = 4e-4
    ki: float = 5e-5
    kd: float = 1e-4
    integral_limit: float = 1000.0  # px*s
    dt: float = DT
    integral: np.ndarray = field(default_factory=lambda: np.zeros(2))
    prev_error: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.dt <= 0.0:
            raise ConfigError("PID dt must be positive")
        if self.integral_limit <= 0.0:
            raise ConfigError("integral clamp limit must be positive")
        object.__setattr__(self, "integral", np.asarray(self.integral, dtype=float))
        if np.any(np.abs(self.integral) > self.integral_limit + 1e-12):
            raise ConfigError("integral accumulator exceeds its clamp limit")


def pid_step(state: PidState, error) -> tuple[np.ndarray, PidState]:
    """One 30 Hz update: command = kp*e + ki*clamp(integral) + kd*de/dt.

    The integral is updated first, then clamped, so the accumulator can
    never wind past the limit. The derivative term is zero on the first
    step (no history yet).
    """
    e = np.asarray(error, dtype=float)
    integral = np.clip(
        state.integral + e * state.dt, -state.integral_limit, state.integral_limit
    )
    prev = e if state.prev_error is None else state.prev_error
    derivative = (e - prev) / state.dt
    command = state.kp * e + state.ki * integral + state.kd * derivative
    return command, replace(state, integral=integral, prev_error=e)


def centering_error(detection: Detection, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pixel offset of the bbox center from the image center (+u, +v)."""
    u, v = detection.center
    return np.array([u - intrinsics.cx, v - intrinsics.cy])


# ---------------------------------------------------------------------------
# stopping criterion


def stopping_distance(
    threshold: float,
    intrinsics: CameraIntrinsics = TIP_INTRINSICS,
    berry_radius: float = DEFAULT_BERRY_RADIUS,
) -> float:
    """Camera-to-center distance at which the bbox width fraction hits the
    stop threshold.

    Inverts the on-axis sphere-projection half-width w = f*r/sqrt(d^2-r^2):
    d = sqrt(r^2 + (f*r / (threshold*W/2))^2). Warns when the distance
    exceeds the 0.04 m gripper length, because then the stop fires before
    the berry is between the fingers.
    """
    if not 0.0 < threshold < 1.0:
        raise InvalidThreshold("stop threshold must lie strictly between 0 and 1")
    half_width_px = threshold * intrinsics.width / 2.0
    d = math.sqrt(
        berry_radius**2 + (intrinsics.fx * berry_radius / half_width_px) ** 2
    )
    if d < berry_radius:
        raise InvalidThreshold("threshold demands stopping inside the berry")
    if d > MIN_STANDOFF:
        warnings.warn(
            f"stopping distance {d:.3f} m exceeds the {MIN_STANDOFF:.2f} m gripper "
            "length; the target will stop short of the capture volume",
            UserWarning,
            stacklevel=2,
        )
    return d


def threshold_for_distance(
    distance: float,
    intrinsics: CameraIntrinsics = TIP_INTRINSICS,
    berry_radius: float = DEFAULT_BERRY_RADIUS,
) -> float:
    """Stop threshold whose stopping_distance equals ``distance`` exactly."""
    if distance <= berry_radius:
        raise InvalidThreshold("stop distance must exceed the berry radius")
    half_width_px = intrinsics.fx * berry_radius / math.sqrt(
        distance**2 - berry_radius**2
    )
    threshold = 2.0 * half_width_px / intrinsics.width
    if not 0.0 < threshold < 1.0:
        raise InvalidThreshold(
            f"distance {distance} m is outside the resolvable threshold range"
        )
    return threshold


# Default stop: berry center 0.035 m from the lens, inside the 0.04 m gripper.
DEFAULT_STOP_THRESHOLD = threshold_for_distance(0.035)


# ---------------------------------------------------------------------------
# servo parameters and machine


@dataclass(frozen=True)
class ServoParams:
    dead_band: float = 12.0  # px, radius around the image center
    stop_threshold: float = DEFAULT_STOP_THRESHOLD  # bbox width / image width
    approach_speed: float = 0.015  # m/s along the optical axis
    creep_speed: float = 0.015 * 0.25  # m/s while the target is lost
    occlusion_timeout: int = 60  # consecutive no-detection ticks (2 s)
    settle_ticks: int = 5  # ticks inside the dead band before approaching
    max_ticks: int = 900  # episode servo budget (30 s)
    pid: PidState = field(default_factory=PidState)

    def __post_init__(self) -> None:
        if self.dead_band <= 0.0:
            raise ConfigError("dead band must be positive")
        if not 0.0 < self.stop_threshold < 1.0:
            raise InvalidThreshold("stop threshold must lie strictly between 0 and 1")
        if not 0.0 < self.creep_speed < self.approach_speed:
            raise ConfigError("creep speed must be positive and below approach speed")
        if self.occlusion_timeout < 1 or self.settle_ticks < 1 or self.max_ticks < 1:
            raise ConfigError("tick counts must be at least 1")


@dataclass(frozen=True, eq=False)
class ServoMachine:
    """Immutable per-tick snapshot of the visual-servo loop."""

    state: ServoState
    pid: PidState
    intrinsics: CameraIntrinsics
    settle_count: int = 0
    occlusion_count: int = 0
    locked_id: int | None = None
    failure_mode: FailureMode | None = None
    last_bbox: tuple[float, float, float, float] | None = None
    last_error: tuple[float, float] | None = None
    last_fraction: float = 0.0


def make_servo_machine(
    intrinsics: CameraIntrinsics, params: ServoParams
) -> ServoMachine:
    if params.dead_band >= min(intrinsics.cx, intrinsics.cy):
        raise ConfigError("dead band must be smaller than the image half-extent")
    return ServoMachine(state=ServoState.CENTER, pid=params.pid, intrinsics=intrinsics)


def _disengaged(pid: PidState) -> PidState:
    """Drop the derivative history while the controller is not stepping.

    Ticks that emit no centering command (inside the dead band, creeping, or
    driving forward) leave the last stepped error arbitrarily stale; taking a
    derivative across that gap on re-engagement produces a large spurious
    kick, so re-engagement restarts with a zero derivative instead.
    """
    if pid.prev_error is None:
        return pid
    return replace(pid, prev_error=None)


def _lateral_twist(tool_pose: Pose, command: np.ndarray) -> np.ndarray:
    """World twist for a camera-frame lateral command (+x toward +u)."""
    r = tool_pose.rotation_matrix()
    v = r[:, 0] * command[0] + r[:, 1] * command[1]
    return np.concatenate([v, np.zeros(3)])


def _forward_twist(tool_pose: Pose, speed: float) -> np.ndarray:
    v = speed * tool_pose.z_axis()
    return np.concatenate([v, np.zeros(3)])


_ZERO_TWIST = np.zeros(6)


def servo_tick(
    machine: ServoMachine,
    detections: list[Detection],
    tool_pose: Pose,
    params: ServoParams,
) -> tuple[np.ndarray, ServoMachine]:
    """Advance the centering/approach loop by one 30 Hz tick.

    Returns the world-frame tool twist for this tick and the next machine
    snapshot. Only Center, Approach and CreepForward accept ticks; the
    transition rules are:

    - any state, no detection: creep forward; fail TargetOcclusion after
      ``occlusion_timeout`` consecutive blind ticks
    - Center: PID lateral motion; zero twist inside the dead band while the
      settle counter runs; Approach after ``settle_ticks`` settled ticks
    - Approach: forward at ``approach_speed`` with exactly zero lateral
      twist inside the dead band; back to Center when the error leaves the
      dead band; Reached when the bbox width fraction reaches the threshold
    - CreepForward: slow forward motion; a re-detection resumes Center
    """
    if machine.state not in _SERVO_STATES:
        raise ConfigError(f"servo_tick does not accept state {machine.state.value}")
    intr = machine.intrinsics
    chosen = select_target(detections, (intr.cx, intr.cy))

    if chosen is None:
        blind = machine.occlusion_count + 1
        base = replace(
            machine,
            pid=_disengaged(machine.pid),
            settle_count=0,
            occlusion_count=blind,
            last_bbox=None,
            last_error=None,
            last_fraction=0.0,
        )
        if blind >= params.occlusion_timeout:
            return _ZERO_TWIST, replace(
                base,
                state=ServoState.FAILED,
                failure_mode=FailureMode.TARGET_OCCLUSION,
            )
        return (
            _forward_twist(tool_pose, params.creep_speed),
            replace(base, state=ServoState.CREEP_FORWARD),
        )

    error = centering_error(chosen, intr)
    error_norm = float(np.hypot(error[0], error[1]))
    fraction = (chosen.bbox[2] - chosen.bbox[0]) / intr.width
    seen = replace(
        machine,
        occlusion_count=0,
        locked_id=chosen.berry_id,
        last_bbox=tuple(float(x) for x in chosen.bbox),
        last_error=(float(error[0]), float(error[1])),
        last_fraction=float(fraction),
    )

    if machine.state is ServoState.APPROACH:
        if fraction >= params.stop_threshold:
            return _ZERO_TWIST, replace(seen, state=ServoState.REACHED, settle_count=0)
        if error_norm > params.dead_band:
            command, pid = pid_step(seen.pid, error)
            return (
                _lateral_twist(tool_pose, command),
                replace(seen, state=ServoState.CENTER, pid=pid, settle_count=0),
            )
        # Inside the dead band the lateral twist is exactly zero.
        return (
            _forward_twist(tool_pose, params.approach_speed),
            replace(seen, pid=_disengaged(seen.pid), settle_count=0),
        )

    # Center, or CreepForward resuming on a re-detection.
    if fraction >= params.stop_threshold and error_norm <= params.dead_band:
        return _ZERO_TWIST, replace(seen, state=ServoState.REACHED, settle_count=0)
    if error_norm <= params.dead_band:
        settled = machine.settle_count + 1
        if settled >= params.settle_ticks:
            return (
                _forward_twist(tool_pose, params.approach_speed),
                replace(
                    seen,
                    state=ServoState.APPROACH,
                    pid=_disengaged(seen.pid),
                    settle_count=0,
                ),
            )
        # Holding still inside the dead band models the pre-approach stop.
        return _ZERO_TWIST, replace(
            seen, state=ServoState.CENTER, pid=_disengaged(seen.pid), settle_count=settled
        )
    command, pid = pid_step(seen.pid, error)
    return (
        _lateral_twist(tool_pose, command),
        replace(seen, state=ServoState.CENTER, pid=pid, settle_count=0),
    )


# ---------------------------------------------------------------------------
# episode-level parameter bundles


@dataclass(frozen=True)
class SensingParams:
    """Cameras, detector and noise configuration for one episode."""

    base_intrinsics: CameraIntrinsics = BASE_INTRINSICS
    tip_intrinsics: CameraIntrinsics = TIP_INTRINSICS
    base_detector: DetectorParams = field(default_factory=DetectorParams)
    tip_detector: DetectorParams = field(default_factory=DetectorParams)
    depth_noise: DepthNoiseModel = field(default_factory=DepthNoiseModel)
    lighting: LightingCondition = field(default_factory=LightingCondition)
    base_camera_position: tuple[float, float, float] = (-0.08, 0.0, 0.45)
    scan_pans: tuple[float, ...] = (-0.35, 0.0, 0.35)
    scan_tilts: tuple[float, ...] = (0.30, 0.45)
    scan_rounds: int = 3
    berry_radius_prior: float = DEFAULT_BERRY_RADIUS
    # Chance per approach tick that arm-foliage contact brushes a leaf into
    # the line of sight (the dominant outdoor failure source).  Only leaves
    # within ``leaf_brush_tube`` of the tool can be caught and displaced.
    leaf_brush_rate: float = 0.002
    leaf_brush_tube: float = 0.06
    # Isotropic Gaussian corruption (metres, per axis) of the 3-D target
    # estimate, modelling a degraded range sensor.  Applied once, before
    # planning; the tip camera is unaffected.
    estimate_noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.scan_rounds < 1 or not self.scan_pans or not self.scan_tilts:
            raise ConfigError("the base scan needs at least one round and one view")
        if not 0.0 <= self.leaf_brush_rate <= 1.0:
            raise ConfigError("leaf brush rate must be a probability")
        if self.leaf_brush_tube <= 0.0:
            raise ConfigError("leaf brush tube radius must be positive")
        if self.estimate_noise_sigma < 0.0:
            raise ConfigError("estimate noise sigma must be non-negative")


@dataclass(frozen=True)
class PlannerParams:
    """Approach-planning configuration for one episode."""

    calibration: ApproachCalibration | None = None  # None: derive from the arm
    initial_offset: float = 0.12
    search: LocalSearchParams = field(default_factory=LocalSearchParams)
    # Planning clearance: twice the contact threshold, so planned paths keep
    # headroom for the in-flight wander of the centering loop.
    margin: float = 2.0 * COLLISION_MARGIN
    # Extra corridor radius over the gripper capsule + margin, absorbing the
    # lateral wander of the centering loop.
    corridor_slack: float = 0.006
    # Obstacles this close to the estimate are the target's own shroud; the
    # corridor check ignores them (the servo loop handles them visually).
    corridor_exclusion: float = 0.10


# ---------------------------------------------------------------------------
# trial result


@dataclass(frozen=True, eq=False)
class TrialResult:
    """Outcome of one reach episode.

    ``success`` is true only when the episode terminated Reached, the berry
    in the gripper is the one the base camera selected, and no foliage ended
    up inside the capture volume. ``reach_time`` is simulated seconds:
    ticks/30 plus planned-motion durations. ``causes`` lists every failure
    cause recorded during the trial (the mode is their precedence maximum).
    """

    success: bool
    terminal_state: ServoState
    failure_mode: FailureMode | None
    reach_time: float
    motion_time: float
    ticks: int
    target_id: int | None
    reached_id: int | None
    terminal_lateral: float | None
    terminal_forward: float | None
    terminal_error: float | None
    foreign_object: bool
    causes: tuple[FailureMode, ...]
    log_reference: str | None = None


def motion_duration(model: ArmModel, q_from: np.ndarray, q_to: np.ndarray) -> float:
    """Planned-motion clock: joint-space path length over the velocity cap."""
    delta = float(np.max(np.abs(np.asarray(q_to) - np.asarray(q_from))))
    return delta / model.max_joint_velocity


def foreign_object_in_grip(
    scene: Scene,
    tool_pose: Pose,
    gripper_length: float = MIN_STANDOFF,
    capture_radius: float = GRIPPER_HALF_STROKE,
) -> bool:
    """True when any foliage primitive intersects the gripper capture volume
    (a capsule of ``capture_radius`` along the tool axis). Berries are not
    foreign objects."""
    a = tool_pose.position
    b = a + gripper_length * tool_pose.z_axis()
    for obstacle in scene.obstacles:
        shape = obstacle.shape
        if isinstance(shape, Disk):
            if _segment_disk_distance(a, b, shape) < capture_radius:
                return True
        elif isinstance(shape, Capsule):
            if (
                _segment_segment_distance(a, b, shape.p0, shape.p1)
                < capture_radius + shape.radius
            ):
                return True
    return False


# ---------------------------------------------------------------------------
# episode runner


class TraceRecorder:
    """Accumulates the trial log and the simulated clock."""

    def __init__(self, sink: list | None):
        self.records = sink if sink is not None else []
        self.state = ServoState.SCAN_BASE
        self.ticks = 0
        self.motion_time = 0.0

    @property
    def t(self) -> float:
        return self.ticks * DT + self.motion_time

    def transition(self, to: ServoState, detail: str = "") -> None:
        if to is self.state:
            return
        self.records.append(
            {
                "type": "transition",
                "tick": self.ticks,
                "t": float(self.t),
                "from": self.state.value,
                "to": to.value,
                "detail": detail,
            }
        )
        self.state = to

    def event(self, kind: str, detail: str) -> None:
        self.records.append(
            {
                "type": "event",
                "tick": self.ticks,
                "t": float(self.t),
                "kind": kind,
                "detail": detail,
            }
        )

    def cause(self, mode: FailureMode) -> None:
        self.records.append(
            {
                "type": "cause",
                "tick": self.ticks,
                "t": float(self.t),
                "mode": mode.value,
            }
        )

    def tick(self, bbox, error, twist, q) -> None:
        self.ticks += 1
        self.records.append(
            {
                "type": "tick",
                "tick": self.ticks,
                "t": float(self.t),
                "state": self.state.value,
                "bbox": None if bbox is None else [float(x) for x in bbox],
                "error": None if error is None else [float(x) for x in error],
                "twist": [float(x) for x in twist],
                "q": [float(x) for x in q],
            }
        )


def evaluate_grip(scene: Scene, tool) -> tuple[int | None, bool]:
    """Terminal capture check for a tool pose.

    Returns ``(reached_id, foreign)``: the id of the berry sitting between
    the fingers (within the gripper span along the tool axis and inside the
    lateral half-stroke; ties resolve to the laterally closest berry), or
    None, plus the foreign-object flag for non-berry foliage inside the
    capture volume.
    """
    reached_id = None
    best_lateral = math.inf
    for berry in scene.berries:
        local = tool.inverse_transform_point(berry.center)
        lateral = float(np.hypot(local[0], local[1]))
        if (
            0.0 <= local[2] <= MIN_STANDOFF + berry.radius
            and lateral < GRIPPER_HALF_STROKE
            and lateral < best_lateral
        ):
            reached_id = berry.id
            best_lateral = lateral
    return reached_id, foreign_object_in_grip(scene, tool)


def compose_result(
    model: ArmModel,
    scene: Scene,
    q: np.ndarray,
    rec: TraceRecorder,
    causes: list,
    terminal: ServoState,
    target_id: int | None,
    reached_id: int | None,
    foreign: bool,
) -> TrialResult:
    """Terminal bookkeeping shared by every episode variant.

    Derives success, the reached-but-wrong causes, the dominant failure mode
    and the terminal geometry, then appends the closing log records. Keeping
    one implementation guarantees identical outcome semantics across the
    closed-loop pipeline and the open-loop baselines.
    """

    def add_cause(mode: FailureMode) -> None:
        causes.append(mode)
        rec.cause(mode)

    tool = forward_kinematics(model, q)
    lateral = forward = error = None
    target = next((b for b in scene.berries if b.id == target_id), None)
    if target is not None:
        local = tool.inverse_transform_point(target.center)
        lateral = float(np.hypot(local[0], local[1]))
        forward = float(local[2])
        error = float(np.linalg.norm(target.center - tool.position))
    success = (
        terminal is ServoState.REACHED
        and target_id is not None
        and reached_id == target_id
        and not foreign
    )
    mode = None
    if not success:
        if terminal is ServoState.REACHED:
            if reached_id is not None and reached_id != target_id:
                add_cause(FailureMode.WRONG_TARGET)
            if foreign:
                add_cause(FailureMode.FOREIGN_OBJECT_IN_GRIP)
            if not causes:
                # Motion completed but nothing sits in the gripper: the
                # perception estimate missed.
                add_cause(FailureMode.DETECTION_FAILURE)
        mode = dominant_failure(causes)
    if terminal is ServoState.FAILED:
        rec.transition(ServoState.FAILED, "" if mode is None else mode.value)
    result = TrialResult(
        success=success,
        terminal_state=terminal,
        failure_mode=mode,
        reach_time=float(rec.t),
        motion_time=float(rec.motion_time),
        ticks=rec.ticks,
        target_id=target_id,
        reached_id=reached_id,
        terminal_lateral=lateral,
        terminal_forward=forward,
        terminal_error=error,
        foreign_object=foreign,
        causes=tuple(causes),
    )
    rec.records.append(
        {
            "type": "result",
            "tick": rec.ticks,
            "t": float(rec.t),
            "success": result.success,
            "terminal_state": result.terminal_state.value,
            "failure_mode": None if mode is None else mode.value,
            "target_id": target_id,
            "reached_id": reached_id,
        }
    )
    return result


def _corridor_clear(
    scene: Scene,
    candidate,
    estimate: np.ndarray,
    corridor_radius: float,
    exclusion_radius: float,
) -> bool:
    """True when the candidate's servo flight path is free of foliage.

    After centering, the tool flies from roughly ``estimate - offset*z`` to
    the stopping point along the candidate's optical axis. Obstacles within
    ``exclusion_radius`` of the estimate are ignored: brushing the foliage
    shell immediately around the target is the price of reaching it and is
    judged in flight, not at planning time.
    """
    z = candidate.pose.z_axis()
    start = estimate - candidate.offset * z
    end = estimate - MIN_STANDOFF * z
    for obstacle in scene.obstacles:
        shape = obstacle.shape
        if isinstance(shape, Disk):
            if float(np.linalg.norm(shape.center - estimate)) < exclusion_radius:
                continue
            if _segment_disk_distance(start, end, shape) < corridor_radius:
                return False
        elif isinstance(shape, Capsule):
            seg = shape.p1 - shape.p0
            denom = float(seg @ seg)
            s = 0.0 if denom < 1e-18 else float(np.clip((estimate - shape.p0) @ seg / denom, 0.0, 1.0))
            if float(np.linalg.norm(shape.p0 + s * seg - estimate)) < exclusion_radius:
                continue
            if (
                _segment_segment_distance(start, end, shape.p0, shape.p1)
                < corridor_radius + shape.radius
            ):
                return False
    return True


def scan_for_target(scene, params: SensingParams, rng):
    """Base-camera sweep: first view with a detection and a valid depth
    return wins. Returns (view, detection, measured_range) or None."""
    position = np.asarray(params.base_camera_position, dtype=float)
    center = (params.base_intrinsics.cx, params.base_intrinsics.cy)
    ever_detected = False
    for _ in range(params.scan_rounds):
        for pan in params.scan_pans:
            for tilt in params.scan_tilts:
                view = make_base_view(position, pan, tilt, params.base_intrinsics)
                detections = sensing.detect(
                    scene, view, params.lighting, rng, params.base_detector
                )
                if not detections:
                    continue
                ever_detected = True
                chosen = select_target(detections, center)
                measured = sensing.measure_depth(
                    scene, view, chosen.center, params.depth_noise, rng
                )
                if measured is not None:
                    return view, chosen, measured, ever_detected
    return None, None, None, ever_detected


def _brush_leaf(
    scene: Scene,
    tool_position: np.ndarray,
    berry_center: np.ndarray,
    tube_radius: float,
):
    """Displace the leaf nearest the tool into the camera-berry line of
    sight; returns the updated scene, or None when no leaf lies within
    ``tube_radius`` of the tool (nothing to brush against)."""
    best_index = None
    best_dist = math.inf
    for index, obstacle in enumerate(scene.obstacles):
        if obstacle.tag == "leaf" and isinstance(obstacle.shape, Disk):
            d = float(np.linalg.norm(obstacle.shape.center - tool_position))
            if d < best_dist:
                best_index, best_dist = index, d
    if best_index is None or best_dist > tube_radius:
        return None
    gap = berry_center - tool_position
    norm = float(np.linalg.norm(gap))
    if norm < 1e-9:
        return None
    moved = Disk(
        center=tool_position + 0.6 * gap,
        normal=gap / norm,
        radius=scene.obstacles[best_index].shape.radius,
    )
    return scene.with_replaced_obstacle(best_index, FoliageObstacle(shape=moved, tag="leaf"))


def run_state_machine(
    scene: Scene,
    model: ArmModel,
    sensing_params: SensingParams | None = None,
    planner_params: PlannerParams | None = None,
    servo_params: ServoParams | None = None,
    rng: np.random.Generator | None = None,
    *,
    q_start: np.ndarray | None = None,
    log: list | None = None,
) -> TrialResult:
    """Run one full reach episode and return its result.

    Phases: base-camera scan -> 3-D estimate -> stand-off pose on the
    calibrated approach line -> planned motion -> tip-visibility check with
    a candidate-pose ladder -> 30 Hz centering/approach servo loop.
    Every state change, sensing tick and failure cause is appended to
    ``log`` (JSON-serializable dicts) when provided.
    """
    sense = sensing_params if sensing_params is not None else SensingParams()
    planner = planner_params if planner_params is not None else PlannerParams()
    servo = servo_params if servo_params is not None else ServoParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    q = np.array(STOW_CONFIG if q_start is None else q_start, dtype=float)

    rec = TraceRecorder(log)
    causes: list[FailureMode] = []
    berries_by_id = {berry.id: berry for berry in scene.berries}

    def add_cause(mode: FailureMode) -> None:
        # Causes carry both the in-memory result and the trial log, so a
        # trace alone is enough to reconstruct the failure classification.
        causes.append(mode)
        rec.cause(mode)

    def finish(terminal: ServoState, target_id, reached_id, foreign: bool) -> TrialResult:
        return compose_result(
            model, scene, q, rec, causes, terminal, target_id, reached_id, foreign
        )

    # --- ScanBase ------------------------------------------------------
    view, base_detection, measured_range, _ = scan_for_target(scene, sense, rng)
    if base_detection is None:
        add_cause(FailureMode.DETECTION_FAILURE)
        return finish(ServoState.FAILED, None, None, False)
    target_id = base_detection.berry_id
    estimate = sensing.estimate_target_position(
        view, base_detection.center, measured_range, sense.berry_radius_prior
    )
    if sense.estimate_noise_sigma > 0.0:
        # Sensor-degradation knob: isotropic corruption of the 3-D target
        # estimate before any planning happens.
        estimate = estimate + rng.normal(0.0, sense.estimate_noise_sigma, 3)
    rec.transition(ServoState.COMPUTE_POSE, f"target {target_id}")

    # --- ComputePose -----------------------------------------------------
    calibration = (
        planner.calibration if planner.calibration is not None else default_calibration(model)
    )
    try:
        initial = compute_initial_pose(
            calibration,
            np.asarray(sense.base_camera_position, dtype=float),
            estimate,
            planner.initial_offset,
            clamp_out_of_hull=True,
        )
    except DegenerateGeometry as exc:
        add_cause(FailureMode.PLANNING_FAILURE)
        rec.event("plan_failure", f"degenerate approach geometry: {exc}")
        return finish(ServoState.FAILED, target_id, None, False)

    # --- MoveToPose / LocalSearch ladder ---------------------------------
    # Rejected candidates are logged as events, but they only become failure
    # causes when the whole ladder is exhausted: a rejection followed by a
    # successful candidate is ordinary search behaviour, not a fault.
    candidates = local_search_sequence(initial, planner.search)
    corridor_radius = model.capsule_radii[-1] + planner.margin + planner.corridor_slack
    acquired = False
    moved = False
    ever_tip_detection = False
    rejections: list[FailureMode] = []
    for candidate in candidates:
        rec.transition(
            ServoState.MOVE_TO_POSE if candidate.search_index == 0 else ServoState.LOCAL_SEARCH,
            f"candidate {candidate.search_index}",
        )
        if not _corridor_clear(
            scene, candidate, estimate, corridor_radius, planner.corridor_exclusion
        ):
            rejections.append(FailureMode.PLANNING_FAILURE)
            rec.event(
                "plan_failure",
                f"candidate {candidate.search_index}: approach corridor blocked",
            )
            continue
        try:
            plan = plan_motion(model, scene, q, candidate, planner.margin)
        except PlanFailure as exc:
            rejections.append(
                FailureMode.WORKSPACE_LIMIT
                if exc.reason is PlanFailureReason.WORKSPACE_LIMIT
                else FailureMode.PLANNING_FAILURE
            )
            rec.event(
                "plan_failure",
                f"candidate {candidate.search_index}: {exc.reason.value}: {exc}",
            )
            continue
        q_next = plan.trajectory[-1]
        rec.motion_time += motion_duration(model, q, q_next)
        q = np.asarray(q_next, dtype=float)
        moved = True
        # One detection query to check tip visibility counts as one tick.
        tool = forward_kinematics(model, q)
        tip_view = make_tip_view(tool, sense.tip_intrinsics)
        detections = sensing.detect(scene, tip_view, sense.lighting, rng, sense.tip_detector)
        chosen = select_target(detections, (sense.tip_intrinsics.cx, sense.tip_intrinsics.cy))
        rec.tick(
            None if chosen is None else chosen.bbox,
            None if chosen is None else centering_error(chosen, sense.tip_intrinsics),
            _ZERO_TWIST,
            q,
        )
        if detections:
            ever_tip_detection = True
            acquired = True
            break
    if not acquired:
        if not moved:
            # Every candidate was rejected before the arm moved at all:
            # the rejection reasons themselves are the causes.
            for mode in dict.fromkeys(rejections):
                add_cause(mode)
        elif ever_tip_detection:
            add_cause(FailureMode.DETECTION_FAILURE)
        else:
            add_cause(FailureMode.TARGET_OCCLUSION)
        return finish(ServoState.FAILED, target_id, None, False)

    # --- servo loop -------------------------------------------------------
    rec.transition(ServoState.CENTER, "target acquired from tip")
    machine = make_servo_machine(sense.tip_intrinsics, servo)
    controller = CartesianVelocityController(model)
    while rec.ticks < servo.max_ticks:
        tool = forward_kinematics(model, q)
        if (
            machine.state in (ServoState.APPROACH, ServoState.CREEP_FORWARD)
            and sense.leaf_brush_rate > 0.0
            and rng.random() < sense.leaf_brush_rate
        ):
            berry = berries_by_id.get(machine.locked_id)
            brushed = None
            if berry is not None:
                brushed = _brush_leaf(
                    scene, tool.position, berry.center, sense.leaf_brush_tube
                )
            if brushed is not None:
                scene = brushed
                rec.event("leaf_brush", "arm contact displaced a leaf into the line of sight")
        tip_view = make_tip_view(tool, sense.tip_intrinsics)
        detections = sensing.detect(scene, tip_view, sense.lighting, rng, sense.tip_detector)
        twist, machine = servo_tick(machine, detections, tool, servo)
        rec.tick(machine.last_bbox, machine.last_error, twist, q)
        rec.transition(machine.state)
        if machine.state is ServoState.REACHED:
            break
        if machine.state is ServoState.FAILED:
            add_cause(machine.failure_mode)
            return finish(ServoState.FAILED, target_id, None, False)
        try:
            q = controller.step(q, twist, DT)
        except WorkspaceLimitError as exc:
            add_cause(FailureMode.WORKSPACE_LIMIT)
            rec.event("workspace_limit", str(exc))
            return finish(ServoState.FAILED, target_id, None, False)
        contacts = check_collision(model, scene, q, margin=0.0)
        if contacts:
            worst = min(contacts, key=lambda c: c.distance)
            add_cause(FailureMode.ENVIRONMENT_COLLISION)
            rec.event(
                "collision",
                f"{worst.kind}[{worst.index}] vs link {worst.link} "
                f"at {worst.distance:.4f} m",
            )
            return finish(ServoState.FAILED, target_id, None, False)
    else:
        # Budget exhausted without reaching the stop: progress stalled, which
        # in this workcell means the commanded motion could not be realized.
        add_cause(FailureMode.WORKSPACE_LIMIT)
        rec.event("tick_budget", f"no terminal state within {servo.max_ticks} ticks")
        return finish(ServoState.FAILED, target_id, None, False)

    # --- terminal evaluation ----------------------------------------------
    reached_id, foreign = evaluate_grip(scene, forward_kinematics(model, q))
    return finish(ServoState.REACHED, target_id, reached_id, foreign)
