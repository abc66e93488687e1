"""Monte Carlo experiment harness.

Eight named scenarios cover the evaluation campaign: an open-loop
depth-only baseline, the full visual-servoing pipeline on a lab plant, the
same pipeline under corrupted depth and two overexposure levels, a
hanging-vine environment, a wrist-mounted ("distal") depth-camera variant,
and an outdoor high-tunnel row. Every scenario derives its per-trial random
streams from one master seed through a scenario-independent scheme, so two
scenarios run with the same master seed face identical scene geometry and
can be compared trial for trial.

Per-trial RNG derivation (documented contract): trial ``i`` of ``n`` uses
``SeedSequence(master_seed).spawn(n)[i].spawn(2)`` whose first child's first
32-bit word seeds the scene generator and whose second child seeds the
episode generator. The derivation never looks at the scenario, the job
count, or the execution order.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import sensing
from .kinematics import (
    ArmModel,
    CartesianVelocityController,
    Pose,
    WorkspaceLimitError,
    default_arm,
    forward_kinematics,
    solve_ik,
)
from .planning import (
    MAX_JOINT_STEP,
    MIN_STANDOFF,
    DegenerateGeometry,
    PlanFailure,
    PlanFailureReason,
    check_collision,
    compute_initial_pose,
    default_calibration,
    local_search_sequence,
    plan_motion,
)
from .scene import ConfigError, Scene, SceneConfig, generate_scene
from .sensing import LightingCondition, make_distal_depth_view, select_target
from .servoing import (
    DT,
    FAILURE_PRECEDENCE,
    GRIPPER_HALF_STROKE,
    STOW_CONFIG,
    FailureMode,
    PlannerParams,
    SensingParams,
    ServoParams,
    ServoState,
    TraceRecorder,
    TrialResult,
    compose_result,
    dominant_failure,
    evaluate_grip,
    motion_duration,
    run_state_machine,
    scan_for_target,
)

__all__ = [
    "ScenarioKind",
    "REPORT_ROW_ORDER",
    "SCENARIO_LABELS",
    "DepthOnlyNoise",
    "DistalDepthParams",
    "ExperimentConfig",
    "TrialRecord",
    "ExperimentSummary",
    "TRIAL_LOG_SCHEMA_VERSION",
    "FAILURE_PRECEDENCE",
    "scenario_bundle",
    "resolved_bundle",
    "depth_only_baseline",
    "distal_depth_baseline",
    "classify_failure",
    "run_trials",
    "run_experiment",
    "summarize",
    "write_trial_logs",
    "emit_report",
]

TRIAL_LOG_SCHEMA_VERSION = 1


class ScenarioKind(Enum):
    DEPTH_ONLY = "depth_only"
    BASELINE = "baseline"
    CORRUPTED_DEPTH = "corrupted_depth"
    LIGHTING_13X = "lighting_13x"
    LIGHTING_20X = "lighting_20x"
    HANGING_VINE = "hanging_vine"
    DISTAL_DEPTH = "distal_depth"
    HIGH_TUNNEL = "high_tunnel"


# Row order of the summary report (open-loop baseline first, then the
# ablations on the lab plant, then the alternative environments and rigs).
REPORT_ROW_ORDER: tuple[ScenarioKind, ...] = (
    ScenarioKind.DEPTH_ONLY,
    ScenarioKind.BASELINE,
    ScenarioKind.CORRUPTED_DEPTH,
    ScenarioKind.LIGHTING_13X,
    ScenarioKind.LIGHTING_20X,
    ScenarioKind.HANGING_VINE,
    ScenarioKind.DISTAL_DEPTH,
    ScenarioKind.HIGH_TUNNEL,
)

SCENARIO_LABELS: dict[ScenarioKind, str] = {
    ScenarioKind.DEPTH_ONLY: "Depth camera only (open loop)",
    ScenarioKind.BASELINE: "Visual servoing on lab plant",
    ScenarioKind.CORRUPTED_DEPTH: "+ corrupted depth",
    ScenarioKind.LIGHTING_13X: "+ 13x light intensity",
    ScenarioKind.LIGHTING_20X: "+ 20x light intensity",
    ScenarioKind.HANGING_VINE: "Hanging vine environment",
    ScenarioKind.DISTAL_DEPTH: "Distal depth camera",
    ScenarioKind.HIGH_TUNNEL: "Outdoor high tunnel",
}


def _valid_scenario_names() -> str:
    return ", ".join(kind.value for kind in ScenarioKind)


def coerce_scenario(value) -> ScenarioKind:
    """Accept a ScenarioKind or its string name; reject anything else with
    a message listing the valid names."""
    if isinstance(value, ScenarioKind):
        return value
    try:
        return ScenarioKind(str(value))
    except ValueError:
        raise ConfigError(
            f"unknown scenario {value!r}; valid scenarios: {_valid_scenario_names()}"
        ) from None


# ---------------------------------------------------------------------------
# baseline-variant parameters


@dataclass(frozen=True)
class DepthOnlyNoise:
    """Error budget of the open-loop pipeline.

    ``depth_sigma`` replaces the base camera's range noise; ``bias_magnitude``
    adds a fixed-length calibration/extrinsic offset in a random direction,
    drawn once per trial. The defaults are calibrated so the open-loop
    terminal error lands in the several-centimetre band observed on
    hardware, not measured from any specific rig.
    """

    depth_sigma: float = 0.02
    bias_magnitude: float = 0.05

    def __post_init__(self) -> None:
        if self.depth_sigma < 0.0 or self.bias_magnitude < 0.0:
            raise ConfigError("depth-only noise terms must be non-negative")


def _default_distal_offset() -> Pose:
    # Camera sits 3 cm beside and 5 cm behind the tool point, looking along
    # the tool axis.
    return Pose(
        position=np.array([0.0, 0.03, -0.05]),
        orientation=np.array([1.0, 0.0, 0.0, 0.0]),
    )


@dataclass(frozen=True)
class DistalDepthParams:
    """Configuration of the wrist-mounted depth-camera variant.

    The depth camera rides on the final link (``camera_offset``, tool
    frame), which enlarges the wrist-segment collision capsule to
    ``profile_radius`` (the fingers themselves stay slim). After the
    stand-off re-measurement the arm drives straight at the refined
    estimate, passing ``waypoint_offset`` metres short of it and stopping
    ``insertion_stop`` metres away — the same terminal range the
    closed-loop pipeline aims for, so the two agree on unobstructed scenes.
    """

    camera_offset: Pose = field(default_factory=_default_distal_offset)
    profile_radius: float = 0.035
    waypoint_offset: float = 0.04
    insertion_stop: float = 0.035
    insertion_speed: float = 0.015
    max_ticks: int = 900

    def __post_init__(self) -> None:
        if self.profile_radius <= 0.0:
            raise ConfigError("distal profile radius must be positive")
        if not 0.0 < self.insertion_stop < self.waypoint_offset:
            raise ConfigError("insertion stop must lie between zero and the waypoint offset")
        if self.insertion_speed <= 0.0 or self.max_ticks < 1:
            raise ConfigError("insertion speed and tick budget must be positive")


# ---------------------------------------------------------------------------
# scenario bundles


@dataclass(frozen=True)
class ScenarioBundle:
    """Complete parameter set for one scenario."""

    kind: ScenarioKind
    label: str
    scene: SceneConfig
    sensing: SensingParams
    planner: PlannerParams
    servo: ServoParams
    default_trials: int
    depth_only_noise: DepthOnlyNoise | None = None
    distal: DistalDepthParams | None = None


def scenario_bundle(kind: ScenarioKind | str) -> ScenarioBundle:
    """Documented parameter bundle for a scenario.

    Each bundle pins exactly the knobs its ablation varies and holds
    everything else at the baseline, so differences between scenario
    outcomes are attributable to the named degradation alone.
    """
    kind = coerce_scenario(kind)
    scene = SceneConfig(kind="lab")
    sense = SensingParams()
    planner = PlannerParams()
    servo = ServoParams()
    if kind is ScenarioKind.BASELINE:
        return ScenarioBundle(kind, SCENARIO_LABELS[kind], scene, sense, planner, servo, 40)
    if kind is ScenarioKind.DEPTH_ONLY:
        return ScenarioBundle(
            kind, SCENARIO_LABELS[kind], scene, sense, planner, servo, 15,
            depth_only_noise=DepthOnlyNoise(),
        )
    if kind is ScenarioKind.CORRUPTED_DEPTH:
        return ScenarioBundle(
            kind, SCENARIO_LABELS[kind], scene,
            replace(sense, estimate_noise_sigma=0.075), planner, servo, 15,
        )
    if kind is ScenarioKind.LIGHTING_13X:
        return ScenarioBundle(
            kind, SCENARIO_LABELS[kind], scene,
            replace(sense, lighting=LightingCondition(multiplier=13.0)), planner, servo, 15,
        )
    if kind is ScenarioKind.LIGHTING_20X:
        return ScenarioBundle(
            kind, SCENARIO_LABELS[kind], scene,
            replace(sense, lighting=LightingCondition(multiplier=20.0)), planner, servo, 15,
        )
    if kind is ScenarioKind.HANGING_VINE:
        return ScenarioBundle(
            kind, SCENARIO_LABELS[kind], SceneConfig(kind="hanging_vine"),
            sense, planner, servo, 15,
        )
    if kind is ScenarioKind.DISTAL_DEPTH:
        return ScenarioBundle(
            kind, SCENARIO_LABELS[kind], scene, sense, planner, servo, 15,
            distal=DistalDepthParams(),
        )
    if kind is ScenarioKind.HIGH_TUNNEL:
        # Outdoor rows keep their natural foliage; the harvest-prepped
        # variant (outer_foliage_removed=True) is available via overrides.
        return ScenarioBundle(
            kind, SCENARIO_LABELS[kind],
            SceneConfig(kind="high_tunnel", outer_foliage_removed=False),
            sense, planner, servo, 20,
        )
    raise ConfigError(f"no bundle for scenario {kind!r}")  # pragma: no cover


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a scenario, a trial count and a master seed.

    Any field left at None falls back to the scenario bundle; overrides are
    absolute (an overridden SensingParams replaces the bundle's entirely,
    including the scenario's signature knob).
    """

    scenario: ScenarioKind
    trials: int | None = None
    master_seed: int = 0
    scene: SceneConfig | None = None
    sensing: SensingParams | None = None
    planner: PlannerParams | None = None
    servo: ServoParams | None = None
    depth_only_noise: DepthOnlyNoise | None = None
    distal: DistalDepthParams | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "scenario", coerce_scenario(self.scenario))
        if self.trials is not None and self.trials < 1:
            raise ConfigError("trial count must be at least 1")


def resolved_bundle(config: ExperimentConfig) -> tuple[ScenarioBundle, int]:
    """The scenario bundle with config overrides applied, plus the trial count."""
    base = scenario_bundle(config.scenario)
    bundle = replace(
        base,
        scene=config.scene if config.scene is not None else base.scene,
        sensing=config.sensing if config.sensing is not None else base.sensing,
        planner=config.planner if config.planner is not None else base.planner,
        servo=config.servo if config.servo is not None else base.servo,
        depth_only_noise=(
            config.depth_only_noise
            if config.depth_only_noise is not None
            else base.depth_only_noise
        ),
        distal=config.distal if config.distal is not None else base.distal,
    )
    trials = config.trials if config.trials is not None else base.default_trials
    return bundle, trials


# ---------------------------------------------------------------------------
# trial records and summaries


@dataclass(frozen=True)
class TrialRecord:
    """One executed trial: the result, its trace, and scoring context.

    ``capture_error`` is the terminal distance (m) from the gripper capture
    centre to the target berry; ``target_placement`` is the target's
    placement class ("periphery"/"under_canopy"), None when no target was
    ever acquired.
    """

    scenario: ScenarioKind
    index: int
    scene_seed: int
    target_placement: str | None
    capture_error: float | None
    result: TrialResult
    trace: tuple = ()


@dataclass(frozen=True)
class ExperimentSummary:
    """Aggregate of one scenario's trials.

    Reach-time statistics are computed over successful trials only (the
    report prints "--" when there are none). The failure histogram keys
    every mode, zeros included, and must account for every failed trial.
    """

    scenario: ScenarioKind
    trials: int
    successes: int
    success_rate: float  # percent
    mean_reach_time: float | None
    std_reach_time: float | None
    failure_histogram: dict

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError("a summary needs at least one trial")
        if sum(self.failure_histogram.values()) + self.successes != self.trials:
            raise ConfigError("failure histogram does not account for every trial")
        if abs(self.success_rate - 100.0 * self.successes / self.trials) > 1e-9:
            raise ConfigError("success rate is inconsistent with the counts")


def summarize(scenario: ScenarioKind | str, records: Sequence[TrialRecord]) -> ExperimentSummary:
    scenario = coerce_scenario(scenario)
    if not records:
        raise ConfigError("cannot summarize zero trials")
    successes = sum(1 for r in records if r.result.success)
    times = [r.result.reach_time for r in records if r.result.success]
    histogram = {mode: 0 for mode in FAILURE_PRECEDENCE}
    for record in records:
        if not record.result.success:
            histogram[record.result.failure_mode] += 1
    mean = float(np.mean(times)) if times else None
    if len(times) > 1:
        std = float(np.std(times, ddof=1))
    else:
        std = 0.0 if times else None
    return ExperimentSummary(
        scenario=scenario,
        trials=len(records),
        successes=successes,
        success_rate=100.0 * successes / len(records),
        mean_reach_time=mean,
        std_reach_time=std,
        failure_histogram=histogram,
    )


# ---------------------------------------------------------------------------
# open-loop depth-only baseline


def depth_only_baseline(
    scene: Scene,
    model: ArmModel,
    noise: DepthOnlyNoise | None = None,
    rng: np.random.Generator | None = None,
    *,
    sensing_params: SensingParams | None = None,
    planner_params: PlannerParams | None = None,
    log: list | None = None,
) -> TrialResult:
    """Open-loop variant: one base-camera estimate, one planned motion, no
    tip feedback.

    The goal pose drops the gripper capture centre directly onto the 3-D
    estimate (zero stand-off), so the terminal error equals the estimate
    error plus planning residue. A trial succeeds only when the target ends
    within the capture radius of the capture centre — blind insertion has no
    feedback to correct an off-centre envelopment, so a miss beyond that
    radius counts as a failed pick even if the berry grazes the grip volume.
    The capture error lands in the trace as a ``terminal_error`` event.
    """
    noise = noise if noise is not None else DepthOnlyNoise()
    rng = rng if rng is not None else np.random.default_rng(0)
    sense = sensing_params if sensing_params is not None else SensingParams()
    sense = replace(sense, depth_noise=replace(sense.depth_noise, sigma=noise.depth_sigma))
    planner = planner_params if planner_params is not None else PlannerParams()

    rec = TraceRecorder(log)
    causes: list[FailureMode] = []
    q = np.array(STOW_CONFIG, dtype=float)

    def fail(mode: FailureMode, target_id) -> TrialResult:
        causes.append(mode)
        rec.cause(mode)
        return compose_result(
            model, scene, q, rec, causes, ServoState.FAILED, target_id, None, False
        )

    view, detection, measured, _ = scan_for_target(scene, sense, rng)
    if detection is None:
        return fail(FailureMode.DETECTION_FAILURE, None)
    target_id = detection.berry_id
    estimate = sensing.estimate_target_position(
        view, detection.center, measured, sense.berry_radius_prior
    )
    if sense.estimate_noise_sigma > 0.0:
        estimate = estimate + rng.normal(0.0, sense.estimate_noise_sigma, 3)
    if noise.bias_magnitude > 0.0:
        direction = rng.normal(0.0, 1.0, 3)
        norm = float(np.linalg.norm(direction))
        while norm < 1e-12:
            direction = rng.normal(0.0, 1.0, 3)
            norm = float(np.linalg.norm(direction))
        estimate = estimate + noise.bias_magnitude * direction / norm
    rec.transition(ServoState.COMPUTE_POSE, f"target {target_id}")

    calibration = (
        planner.calibration if planner.calibration is not None else default_calibration(model)
    )
    try:
        standoff = compute_initial_pose(
            calibration,
            np.asarray(sense.base_camera_position, dtype=float),
            estimate,
            MIN_STANDOFF,
            clamp_out_of_hull=True,
        )
    except DegenerateGeometry as exc:
        rec.event("plan_failure", f"degenerate approach geometry: {exc}")
        return fail(FailureMode.PLANNING_FAILURE, target_id)
    # Advance past the minimum stand-off so the capture centre (mid-gripper)
    # lands exactly on the estimate.
    pose = standoff.pose
    advance = MIN_STANDOFF - model.gripper_length / 2.0
    goal = Pose.from_matrix(
        pose.rotation_matrix(), pose.position + advance * pose.z_axis()
    )
    rec.transition(ServoState.MOVE_TO_POSE, "open-loop goal")
    # A blind rig does not pre-reject tight corridors: it executes the
    # commanded path and physically hits whatever crosses it, so the
    # interpolated motion is swept with contact-level checks instead of the
    # closed-loop planner's clearance margin.
    q_goal = solve_ik(model, goal, seed=q)
    if q_goal is None:
        rec.event("plan_failure", "no IK solution for the open-loop goal")
        return fail(FailureMode.WORKSPACE_LIMIT, target_id)
    delta = q_goal - q
    steps = max(1, int(math.ceil(np.max(np.abs(delta)) / MAX_JOINT_STEP)))
    q_start = q
    for step in range(1, steps + 1):
        q = q_start + (step / steps) * delta
        contacts = check_collision(model, scene, q, margin=0.0)
        if contacts:
            worst = min(contacts, key=lambda c: c.distance)
            rec.motion_time += motion_duration(model, q_start, q)
            rec.event(
                "collision",
                f"{worst.kind}[{worst.index}] vs link {worst.link} "
                f"at {worst.distance:.4f} m",
            )
            return fail(FailureMode.ENVIRONMENT_COLLISION, target_id)
    rec.motion_time += motion_duration(model, q_start, q_goal)
    q = np.asarray(q_goal, dtype=float)

    tool = forward_kinematics(model, q)
    target = next(b for b in scene.berries if b.id == target_id)
    capture_center = tool.position + (model.gripper_length / 2.0) * tool.z_axis()
    capture_error = float(np.linalg.norm(target.center - capture_center))
    rec.event("terminal_error", f"{capture_error:.6f} m from capture centre to target")
    reached_id, foreign = evaluate_grip(scene, tool)
    if reached_id == target_id and capture_error >= GRIPPER_HALF_STROKE:
        # Enveloped but off-centre: without feedback the fingers close on
        # air or foliage as often as on the berry, so this is not a pick.
        reached_id = None
    return compose_result(
        model, scene, q, rec, causes, ServoState.REACHED, target_id, reached_id, foreign
    )


# ---------------------------------------------------------------------------
# wrist-mounted (distal) depth-camera baseline


def distal_depth_baseline(
    scene: Scene,
    model: ArmModel,
    params: DistalDepthParams | None = None,
    rng: np.random.Generator | None = None,
    *,
    sensing_params: SensingParams | None = None,
    planner_params: PlannerParams | None = None,
    log: list | None = None,
) -> TrialResult:
    """Pipeline variant with the depth camera moved onto the final link.

    The arm plans to the usual stand-off pose, re-measures the target with
    the wrist depth camera, then drives straight at the refined estimate —
    through a waypoint ``waypoint_offset`` short of it, stopping at
    ``insertion_stop`` — with no visual feedback on the way in. The camera
    enlarges the wrist-segment collision capsule to ``profile_radius``, so
    the same scenes produce more environment contact than the slim
    collocated rig.
    """
    params = params if params is not None else DistalDepthParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    sense = sensing_params if sensing_params is not None else SensingParams()
    planner = planner_params if planner_params is not None else PlannerParams()

    radii = np.array(model.capsule_radii, dtype=float)
    radii[-2] = params.profile_radius  # wrist segment carrying the camera
    rig = replace(model, capsule_radii=radii)

    rec = TraceRecorder(log)
    causes: list[FailureMode] = []
    q = np.array(STOW_CONFIG, dtype=float)

    def fail(mode: FailureMode, target_id) -> TrialResult:
        causes.append(mode)
        rec.cause(mode)
        return compose_result(
            rig, scene, q, rec, causes, ServoState.FAILED, target_id, None, False
        )

    view, detection, measured, _ = scan_for_target(scene, sense, rng)
    if detection is None:
        return fail(FailureMode.DETECTION_FAILURE, None)
    target_id = detection.berry_id
    estimate = sensing.estimate_target_position(
        view, detection.center, measured, sense.berry_radius_prior
    )
    if sense.estimate_noise_sigma > 0.0:
        estimate = estimate + rng.normal(0.0, sense.estimate_noise_sigma, 3)
    rec.transition(ServoState.COMPUTE_POSE, f"target {target_id}")

    calibration = (
        planner.calibration if planner.calibration is not None else default_calibration(rig)
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
        rec.event("plan_failure", f"degenerate approach geometry: {exc}")
        return fail(FailureMode.PLANNING_FAILURE, target_id)

    # Same candidate ladder as the collocated pipeline, but acquisition
    # means the wrist camera sees a target from the stand-off.
    wrist_view = None
    chosen = None
    moved = False
    ever_wrist_detection = False
    rejections: list[FailureMode] = []
    for candidate in local_search_sequence(initial, planner.search):
        rec.transition(
            ServoState.MOVE_TO_POSE if candidate.search_index == 0 else ServoState.LOCAL_SEARCH,
            f"candidate {candidate.search_index}",
        )
        try:
            plan = plan_motion(rig, scene, q, candidate, planner.margin)
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
        rec.motion_time += motion_duration(rig, q, q_next)
        q = np.asarray(q_next, dtype=float)
        moved = True
        # One wrist-camera query per candidate counts as one tick.
        tool = forward_kinematics(rig, q)
        wrist_view = make_distal_depth_view(tool, params.camera_offset, sense.base_intrinsics)
        detections = sensing.detect(scene, wrist_view, sense.lighting, rng, sense.base_detector)
        chosen = select_target(detections, (sense.base_intrinsics.cx, sense.base_intrinsics.cy))
        rec.tick(
            None if chosen is None else chosen.bbox,
            None,
            np.zeros(6),
            q,
        )
        if chosen is not None:
            ever_wrist_detection = True
            break
    if chosen is None:
        if not moved:
            for mode in dict.fromkeys(rejections):
                causes.append(mode)
                rec.cause(mode)
            return compose_result(
                rig, scene, q, rec, causes, ServoState.FAILED, target_id, None, False
            )
        if ever_wrist_detection:
            return fail(FailureMode.DETECTION_FAILURE, target_id)
        return fail(FailureMode.TARGET_OCCLUSION, target_id)
    tool = forward_kinematics(rig, q)
    measured = sensing.measure_depth(scene, wrist_view, chosen.center, sense.depth_noise, rng)
    if measured is None:
        return fail(FailureMode.DETECTION_FAILURE, target_id)
    refined = sensing.estimate_target_position(
        wrist_view, chosen.center, measured, sense.berry_radius_prior
    )
    if sense.estimate_noise_sigma > 0.0:
        refined = refined + rng.normal(0.0, sense.estimate_noise_sigma, 3)

    # Straight blind insertion toward the refined estimate. Steering aims
    # at the fixed point each tick (joint-level position feedback, no
    # vision), so controller tracking drift self-corrects on the way in.
    if float(np.linalg.norm(refined - tool.position)) <= params.insertion_stop:
        return fail(FailureMode.PLANNING_FAILURE, target_id)
    rec.transition(ServoState.APPROACH, "straight insertion toward refined estimate")
    controller = CartesianVelocityController(rig)
    waypoint_logged = False
    while rec.ticks < params.max_ticks:
        tool = forward_kinematics(rig, q)
        span = refined - tool.position
        remaining = float(np.linalg.norm(span))
        if not waypoint_logged and remaining <= params.waypoint_offset:
            rec.event(
                "waypoint", f"passed the {params.waypoint_offset:.3f} m offset point"
            )
            waypoint_logged = True
        if remaining <= params.insertion_stop:
            break
        twist = np.zeros(6)
        twist[:3] = params.insertion_speed * (span / remaining)
        rec.tick(None, None, twist, q)
        try:
            q = controller.step(q, twist, DT)
        except WorkspaceLimitError as exc:
            rec.event("workspace_limit", str(exc))
            return fail(FailureMode.WORKSPACE_LIMIT, target_id)
        contacts = check_collision(rig, scene, q, margin=0.0)
        if contacts:
            worst = min(contacts, key=lambda c: c.distance)
            rec.event(
                "collision",
                f"{worst.kind}[{worst.index}] vs link {worst.link} "
                f"at {worst.distance:.4f} m",
            )
            return fail(FailureMode.ENVIRONMENT_COLLISION, target_id)
    else:
        rec.event("tick_budget", f"no terminal state within {params.max_ticks} ticks")
        return fail(FailureMode.WORKSPACE_LIMIT, target_id)

    reached_id, foreign = evaluate_grip(scene, forward_kinematics(rig, q))
    return compose_result(
        rig, scene, q, rec, causes, ServoState.REACHED, target_id, reached_id, foreign
    )


# ---------------------------------------------------------------------------
# failure classification


def classify_failure(trace: Sequence[dict]) -> FailureMode:
    """Re-derive the failure mode of a failed trial from its trace alone.

    Every pipeline variant logs each failure cause as a ``cause`` record, so
    the classification is a pure function of the trace: collect the causes
    and apply the documented precedence (EnvironmentCollision >
    TargetOcclusion > WorkspaceLimit > PlanningFailure > WrongTarget >
    ForeignObjectInGrip > DetectionFailure, the order of
    ``FAILURE_PRECEDENCE``). Raises ValueError on a trace without causes
    (i.e. a successful trial).
    """
    causes = [
        FailureMode(record["mode"])
        for record in trace
        if isinstance(record, dict) and record.get("type") == "cause"
    ]
    if not causes:
        raise ValueError("trace carries no failure causes; the trial did not fail")
    return dominant_failure(causes)


# ---------------------------------------------------------------------------
# trial execution


@dataclass(frozen=True)
class _TrialJob:
    """Self-contained, picklable description of one trial."""

    scenario: ScenarioKind
    index: int
    scene_config: SceneConfig
    scene_seed: int
    episode_seed: np.random.SeedSequence
    sensing: SensingParams
    planner: PlannerParams
    servo: ServoParams
    depth_only_noise: DepthOnlyNoise | None
    distal: DistalDepthParams | None


def _execute_trial(job: _TrialJob) -> TrialRecord:
    scene = generate_scene(job.scene_config, job.scene_seed)
    model = default_arm(tuple(float(v) for v in scene.robot_base))
    rng = np.random.default_rng(job.episode_seed)
    trace: list = []
    if job.scenario is ScenarioKind.DEPTH_ONLY:
        result = depth_only_baseline(
            scene,
            model,
            job.depth_only_noise,
            rng,
            sensing_params=job.sensing,
            planner_params=job.planner,
            log=trace,
        )
    elif job.scenario is ScenarioKind.DISTAL_DEPTH:
        result = distal_depth_baseline(
            scene,
            model,
            job.distal,
            rng,
            sensing_params=job.sensing,
            planner_params=job.planner,
            log=trace,
        )
    else:
        result = run_state_machine(
            scene, model, job.sensing, job.planner, job.servo, rng, log=trace
        )
    placement = None
    if result.target_id is not None:
        target = next(b for b in scene.berries if b.id == result.target_id)
        placement = target.placement.value
    capture_error = None
    if result.terminal_lateral is not None and result.terminal_forward is not None:
        capture_error = float(
            math.hypot(
                result.terminal_lateral,
                result.terminal_forward - model.gripper_length / 2.0,
            )
        )
    return TrialRecord(
        scenario=job.scenario,
        index=job.index,
        scene_seed=job.scene_seed,
        target_placement=placement,
        capture_error=capture_error,
        result=result,
        trace=tuple(trace),
    )


def _trial_jobs(config: ExperimentConfig) -> list[_TrialJob]:
    bundle, trials = resolved_bundle(config)
    root = np.random.SeedSequence(config.master_seed)
    jobs = []
    for index, child in enumerate(root.spawn(trials)):
        scene_ss, episode_ss = child.spawn(2)
        jobs.append(
            _TrialJob(
                scenario=bundle.kind,
                index=index,
                scene_config=bundle.scene,
                scene_seed=int(scene_ss.generate_state(1)[0]),
                episode_seed=episode_ss,
                sensing=bundle.sensing,
                planner=bundle.planner,
                servo=bundle.servo,
                depth_only_noise=bundle.depth_only_noise,
                distal=bundle.distal,
            )
        )
    return jobs


def run_trials(config: ExperimentConfig, jobs: int = 1) -> list[TrialRecord]:
    """Execute every trial of the experiment and return the records in
    trial order.

    ``jobs`` > 1 fans the trials out over processes; each trial's random
    streams are derived only from the master seed and the trial index (see
    the module docstring), so the results are independent of the job count
    and of execution order.
    """
    if jobs < 1:
        raise ConfigError("job count must be at least 1")
    work = _trial_jobs(config)
    if jobs == 1 or len(work) == 1:
        return [_execute_trial(job) for job in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_execute_trial, work))


def write_trial_logs(records: Sequence[TrialRecord], out_dir) -> list[Path]:
    """Write one JSONL trace per trial under ``out_dir/trials/``.

    Line one is a schema header; the remaining lines are the trace records
    in order. Output bytes are a pure function of the records.
    """
    trials_dir = Path(out_dir) / "trials"
    trials_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for record in records:
        path = trials_dir / f"{record.scenario.value}_{record.index:04d}.jsonl"
        header = {
            "type": "header",
            "schema": TRIAL_LOG_SCHEMA_VERSION,
            "scenario": record.scenario.value,
            "trial": record.index,
            "scene_seed": record.scene_seed,
        }
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for entry in record.trace:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        paths.append(path)
    return paths


def run_experiment(
    config: ExperimentConfig, out_dir=None, jobs: int = 1
) -> ExperimentSummary:
    """Run one scenario end to end and aggregate it.

    When ``out_dir`` is given, per-trial JSONL traces land under
    ``out_dir/trials/``. The summary (and every written byte) is
    reproducible from the config alone.
    """
    records = run_trials(config, jobs=jobs)
    summary = summarize(config.scenario, records)
    if out_dir is not None:
        write_trial_logs(records, out_dir)
    return summary


# ---------------------------------------------------------------------------
# report emission


def _report_rows(summaries: Sequence[ExperimentSummary]) -> list[ExperimentSummary]:
    order = {kind: i for i, kind in enumerate(REPORT_ROW_ORDER)}
    return sorted(summaries, key=lambda s: order.get(s.scenario, len(order)))


def _format_time(value: float | None) -> str:
    return "--" if value is None else f"{value:.2f}"


def emit_report(summaries: Sequence[ExperimentSummary], out_dir) -> str:
    """Write ``summary.csv`` and ``failures.csv`` and return a rendered
    text table.

    Rows follow ``REPORT_ROW_ORDER``; reach times are success-conditioned
    ("--" when a scenario never succeeded); ``failures.csv`` has one column
    per failure mode in precedence order, zeros included. All output is
    byte-deterministic for identical summaries.
    """
    if not summaries:
        raise ConfigError("emit_report needs at least one summary")
    rows = _report_rows(summaries)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    summary_path = out / "summary.csv"
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "scenario",
                "label",
                "trials",
                "successes",
                "success_rate_pct",
                "mean_reach_time_s",
                "std_reach_time_s",
            ]
        )
        for row in rows:
            writer.writerow(
                [
                    row.scenario.value,
                    SCENARIO_LABELS.get(row.scenario, row.scenario.value),
                    row.trials,
                    row.successes,
                    f"{row.success_rate:.1f}",
                    _format_time(row.mean_reach_time),
                    _format_time(row.std_reach_time),
                ]
            )

    failures_path = out / "failures.csv"
    with open(failures_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scenario"] + [mode.value for mode in FAILURE_PRECEDENCE])
        for row in rows:
            writer.writerow(
                [row.scenario.value]
                + [row.failure_histogram.get(mode, 0) for mode in FAILURE_PRECEDENCE]
            )

    label_width = max(len(SCENARIO_LABELS.get(r.scenario, r.scenario.value)) for r in rows)
    label_width = max(label_width, len("scenario"))
    lines = [
        f"{'scenario':<{label_width}}  {'n':>4}  {'success %':>9}  reach time (s)"
    ]
    for row in rows:
        label = SCENARIO_LABELS.get(row.scenario, row.scenario.value)
        if row.mean_reach_time is None:
            time_text = "--"
        else:
            time_text = f"{row.mean_reach_time:.2f} +/- {_format_time(row.std_reach_time)}"
        lines.append(
            f"{label:<{label_width}}  {row.trials:>4}  {row.success_rate:>9.1f}  {time_text}"
        )
    return "\n".join(lines) + "\n"
