"""Visual-servo loop tests: PID behaviour against the closed-form
anti-windup oracle, stopping-distance geometry, per-tick state machine
semantics, and full reach episodes on hand-built scenes covering every
failure mode."""

import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from berryreach.kinematics import Pose, default_arm, forward_kinematics
from berryreach.scene import Berry, Capsule, ConfigError, Disk, FoliageObstacle
from berryreach.sensing import (
    CameraRole,
    Detection,
    TIP_INTRINSICS,
    make_tip_view,
    project_sphere,
)
from berryreach import sensing as sensing_module
from berryreach.servoing import (
    DEFAULT_STOP_THRESHOLD,
    DT,
    FAILURE_PRECEDENCE,
    FailureMode,
    GRIPPER_HALF_STROKE,
    InvalidThreshold,
    PidState,
    STOW_CONFIG,
    ServoParams,
    ServoState,
    TRANSITIONS,
    TrialResult,
    centering_error,
    dominant_failure,
    foreign_object_in_grip,
    make_servo_machine,
    motion_duration,
    pid_step,
    run_state_machine,
    servo_tick,
    stopping_distance,
    threshold_for_distance,
)

from oracles import pid_clamp_steps
from scripted_scenes import (
    SCRIPTED_FAILURES,
    clean_episode,
    scene_of,
    wrong_target_scene,
    zero_noise_sensing,
)

MODEL = default_arm()
IDENTITY_POSE = Pose.from_matrix(np.eye(3), np.zeros(3))


def _detection_at(center_u, center_v, width=40.0, height=40.0, berry_id=0):
    return Detection(
        berry_id=berry_id,
        bbox=(
            center_u - width / 2.0,
            center_v - height / 2.0,
            center_u + width / 2.0,
            center_v + height / 2.0,
        ),
        confidence=1.0,
    )


def _centered_detection(error_u, error_v, **kwargs):
    return _detection_at(
        TIP_INTRINSICS.cx + error_u, TIP_INTRINSICS.cy + error_v, **kwargs
    )


def _wide_detection(error_u=0.0, error_v=0.0, fraction=0.9):
    width = fraction * TIP_INTRINSICS.width
    return _detection_at(
        TIP_INTRINSICS.cx + error_u, TIP_INTRINSICS.cy + error_v, width=width
    )


# ---------------------------------------------------------------------------
# PID controller


def test_pid_zero_error_gives_zero_command():
    command, state = pid_step(PidState(), np.zeros(2))
    assert np.allclose(command, 0.0)
    assert np.allclose(state.integral, 0.0)


def test_pid_first_step_has_no_derivative_term():
    pid = PidState()
    error = np.array([20.0, -8.0])
    command, state = pid_step(pid, error)
    expected = pid.kp * error + pid.ki * (error * pid.dt)
    assert np.allclose(command, expected)
    assert state.prev_error is not None


def test_pid_second_step_derivative_value():
    pid = PidState()
    e0 = np.array([20.0, -8.0])
    e1 = np.array([14.0, -2.0])
    _, s1 = pid_step(pid, e0)
    command, s2 = pid_step(s1, e1)
    integral = e0 * pid.dt + e1 * pid.dt
    expected = pid.kp * e1 + pid.ki * integral + pid.kd * (e1 - e0) / pid.dt
    assert np.allclose(command, expected)
    assert np.allclose(s2.integral, integral)


@pytest.mark.parametrize(
    "error,limit,dt",
    [(25.0, 997.0, 1.0 / 30.0), (7.5, 100.0, 0.05), (-12.0, 395.0, 1.0 / 30.0), (3.0, 50.0, 0.1)],
)
def test_pid_anti_windup_step_count_matches_oracle(error, limit, dt):
    state = PidState(integral_limit=limit, dt=dt)
    e = np.array([error, 0.0])
    steps = 0
    while abs(state.integral[0]) < limit:
        _, state = pid_step(state, e)
        steps += 1
        assert steps < 10_000
    assert steps == pid_clamp_steps(limit, error, dt)
    # Once clamped the integral stays exactly at the limit.
    _, again = pid_step(state, e)
    assert abs(again.integral[0]) == pytest.approx(limit)


@given(
    errors=st.lists(
        st.tuples(
            st.floats(-300.0, 300.0, allow_nan=False),
            st.floats(-300.0, 300.0, allow_nan=False),
        ),
        min_size=1,
        max_size=60,
    ),
    limit=st.floats(1.0, 2000.0, allow_nan=False),
)
@settings(max_examples=60, deadline=None)
def test_pid_integral_never_exceeds_limit(errors, limit):
    state = PidState(integral_limit=limit)
    for e in errors:
        _, state = pid_step(state, np.array(e))
        assert np.all(np.abs(state.integral) <= limit + 1e-12)


def test_pid_state_validation():
    with pytest.raises(ConfigError):
        PidState(dt=0.0)
    with pytest.raises(ConfigError):
        PidState(integral_limit=-1.0)


def test_centering_error_examples():
    det = _centered_detection(10.0, -5.0)
    assert centering_error(det, TIP_INTRINSICS) == pytest.approx([10.0, -5.0])
    centered = _centered_detection(0.0, 0.0)
    assert centering_error(centered, TIP_INTRINSICS) == pytest.approx([0.0, 0.0])


# ---------------------------------------------------------------------------
# stopping-distance geometry


def test_stopping_distance_round_trip_exact():
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        for distance in (0.035, 0.04, 0.06, 0.1):
            tau = threshold_for_distance(distance)
            assert stopping_distance(tau) == pytest.approx(distance, rel=1e-12)
    assert stopping_distance(DEFAULT_STOP_THRESHOLD) == pytest.approx(0.035, rel=1e-12)


def test_stopping_distance_monotone_decreasing_in_threshold():
    import warnings

    taus = np.linspace(0.05, 0.999, 40)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        distances = [stopping_distance(t) for t in taus]
    assert all(a > b for a, b in zip(distances, distances[1:]))


def test_stopping_distance_near_full_width_stays_above_radius():
    radius = 0.015
    d = stopping_distance(0.999999, berry_radius=radius)
    # The exact pinhole inverse keeps the camera more than one radius away
    # even when the box spans the full image.
    assert radius < d <= 2.0 * radius


def test_stopping_distance_invalid_threshold():
    for tau in (0.0, 1.0, -0.2, 1.3):
        with pytest.raises(InvalidThreshold):
            stopping_distance(tau)
    with pytest.raises(InvalidThreshold):
        threshold_for_distance(0.01)  # below the berry radius


def test_stopping_distance_warns_beyond_gripper_envelope():
    far = threshold_for_distance(0.09)
    with pytest.warns(UserWarning):
        stopping_distance(far)


# ---------------------------------------------------------------------------
# servo_tick state semantics


def _machine(state=ServoState.CENTER, params=None, **fields):
    machine = make_servo_machine(TIP_INTRINSICS, params or ServoParams())
    if state is not ServoState.CENTER or fields:
        machine = replace(machine, state=state, **fields)
    return machine


def test_center_lateral_command_sign_is_positive_gain():
    params = ServoParams()
    twist, nxt = servo_tick(_machine(), [_centered_detection(60.0, 0.0)], IDENTITY_POSE, params)
    # +u error with identity pose (camera x == world x) must move along +x.
    assert twist[0] > 0.0
    assert twist[1] == pytest.approx(0.0)
    assert twist[2] == pytest.approx(0.0)
    assert nxt.state is ServoState.CENTER
    expected, _ = pid_step(params.pid, np.array([60.0, 0.0]))
    assert twist[0] == pytest.approx(expected[0])


def test_center_settles_then_approaches():
    params = ServoParams()
    machine = _machine()
    det = [_centered_detection(3.0, -2.0)]
    for _ in range(params.settle_ticks - 1):
        twist, machine = servo_tick(machine, det, IDENTITY_POSE, params)
        assert machine.state is ServoState.CENTER
        assert np.allclose(twist, 0.0)
    twist, machine = servo_tick(machine, det, IDENTITY_POSE, params)
    assert machine.state is ServoState.APPROACH
    assert twist[2] == pytest.approx(params.approach_speed)
    assert twist[0] == pytest.approx(0.0) and twist[1] == pytest.approx(0.0)


def test_settle_counter_resets_on_band_exit():
    params = ServoParams()
    machine = _machine()
    inside = [_centered_detection(4.0, 0.0)]
    outside = [_centered_detection(30.0, 0.0)]
    for _ in range(3 * params.settle_ticks):
        _, machine = servo_tick(machine, inside, IDENTITY_POSE, params)
        assert machine.state is ServoState.CENTER
        _, machine = servo_tick(machine, outside, IDENTITY_POSE, params)
        assert machine.state is ServoState.CENTER  # never reaches Approach


def test_approach_zero_lateral_inside_band():
    params = ServoParams()
    twist, nxt = servo_tick(
        _machine(ServoState.APPROACH), [_centered_detection(8.0, 5.0)], IDENTITY_POSE, params
    )
    assert nxt.state is ServoState.APPROACH
    assert twist[0] == 0.0 and twist[1] == 0.0
    assert twist[2] == pytest.approx(params.approach_speed)


def test_approach_band_exit_steps_pid_and_recenters():
    params = ServoParams()
    twist, nxt = servo_tick(
        _machine(ServoState.APPROACH), [_centered_detection(40.0, 0.0)], IDENTITY_POSE, params
    )
    assert nxt.state is ServoState.CENTER
    assert twist[2] == pytest.approx(0.0)
    assert twist[0] > 0.0


def test_approach_reaches_at_stop_fraction():
    params = ServoParams()
    twist, nxt = servo_tick(
        _machine(ServoState.APPROACH),
        [_wide_detection(fraction=params.stop_threshold + 0.01)],
        IDENTITY_POSE,
        params,
    )
    assert nxt.state is ServoState.REACHED
    assert np.allclose(twist, 0.0)


def test_center_requires_band_and_fraction_to_reach():
    params = ServoParams()
    wide_off_center = [_wide_detection(error_u=40.0, fraction=params.stop_threshold + 0.05)]
    twist, nxt = servo_tick(_machine(), wide_off_center, IDENTITY_POSE, params)
    assert nxt.state is ServoState.CENTER  # wide box alone is not enough
    assert twist[0] > 0.0
    wide_centered = [_wide_detection(error_u=2.0, fraction=params.stop_threshold + 0.05)]
    _, nxt = servo_tick(_machine(), wide_centered, IDENTITY_POSE, params)
    assert nxt.state is ServoState.REACHED


def test_no_detection_creeps_then_times_out():
    params = ServoParams()
    machine = _machine()
    for tick in range(params.occlusion_timeout - 1):
        twist, machine = servo_tick(machine, [], IDENTITY_POSE, params)
        assert machine.state is ServoState.CREEP_FORWARD
        assert twist[2] == pytest.approx(params.creep_speed)
    twist, machine = servo_tick(machine, [], IDENTITY_POSE, params)
    assert machine.state is ServoState.FAILED
    assert machine.failure_mode is FailureMode.TARGET_OCCLUSION
    assert np.allclose(twist, 0.0)


def test_redetection_resets_blind_counter_and_recenters():
    params = ServoParams()
    machine = _machine()
    for _ in range(params.occlusion_timeout - 5):
        _, machine = servo_tick(machine, [], IDENTITY_POSE, params)
    _, machine = servo_tick(machine, [_centered_detection(30.0, 0.0)], IDENTITY_POSE, params)
    assert machine.state is ServoState.CENTER
    assert machine.occlusion_count == 0
    # The blind budget is full again after the re-detection.
    for _ in range(params.occlusion_timeout - 1):
        _, machine = servo_tick(machine, [], IDENTITY_POSE, params)
        assert machine.state is not ServoState.FAILED


def test_servo_tick_rejects_non_servo_states():
    for state in (
        ServoState.SCAN_BASE,
        ServoState.COMPUTE_POSE,
        ServoState.MOVE_TO_POSE,
        ServoState.LOCAL_SEARCH,
        ServoState.REACHED,
        ServoState.FAILED,
    ):
        with pytest.raises(ConfigError):
            servo_tick(_machine(state), [], IDENTITY_POSE, ServoParams())


def test_servo_tick_totality_fuzz():
    params = ServoParams()
    rng = np.random.default_rng(0)
    states = (ServoState.CENTER, ServoState.APPROACH, ServoState.CREEP_FORWARD)
    for _ in range(400):
        state = states[rng.integers(len(states))]
        machine = _machine(
            state,
            settle_count=int(rng.integers(0, params.settle_ticks)),
            occlusion_count=int(rng.integers(0, params.occlusion_timeout)),
        )
        detections = []
        for berry_id in range(rng.integers(0, 3)):
            u = float(rng.uniform(-50.0, TIP_INTRINSICS.width + 50.0))
            v = float(rng.uniform(-50.0, TIP_INTRINSICS.height + 50.0))
            w = float(rng.uniform(2.0, 700.0))
            detections.append(_detection_at(u, v, width=w, height=w, berry_id=berry_id))
        twist, nxt = servo_tick(machine, detections, IDENTITY_POSE, params)
        assert np.all(np.isfinite(twist))
        assert nxt.state in TRANSITIONS[state] | {state}


def test_closed_loop_centering_error_contracts():
    """Kinematic camera-in-the-loop: each PID step shrinks the pixel error."""
    params = ServoParams()
    machine = _machine()
    position = np.zeros(3)
    berry = Berry(id=0, center=(0.014, -0.009, 0.12))
    scene = scene_of([berry])
    norms = []
    for _ in range(90):
        pose = Pose.from_matrix(np.eye(3), position)
        bbox = project_sphere(make_tip_view(pose), berry)
        det = Detection(berry_id=0, bbox=bbox, confidence=1.0)
        error = centering_error(det, TIP_INTRINSICS)
        norms.append(float(np.hypot(*error)))
        twist, machine = servo_tick(machine, [det], pose, params)
        position = position + twist[:3] * DT
        if machine.state is not ServoState.CENTER:
            break
    stepped = [n for n in norms if n > params.dead_band]
    assert len(stepped) >= 5
    assert all(a > b for a, b in zip(stepped, stepped[1:]))
    assert norms[-1] <= params.dead_band


def test_servo_params_validation():
    with pytest.raises(ConfigError):
        ServoParams(dead_band=0.0)
    with pytest.raises(InvalidThreshold):
        ServoParams(stop_threshold=1.2)
    with pytest.raises(ConfigError):
        ServoParams(creep_speed=0.02, approach_speed=0.015)
    with pytest.raises(ConfigError):
        ServoParams(settle_ticks=0)
    with pytest.raises(ConfigError):
        make_servo_machine(TIP_INTRINSICS, ServoParams(dead_band=500.0))


# ---------------------------------------------------------------------------
# failure taxonomy


def test_failure_mode_canonical_names():
    assert {mode.value for mode in FailureMode} == {
        "TargetOcclusion",
        "EnvironmentCollision",
        "WorkspaceLimit",
        "PlanningFailure",
        "DetectionFailure",
        "ForeignObjectInGrip",
        "WrongTarget",
    }


def test_dominant_failure_follows_precedence():
    assert len(FAILURE_PRECEDENCE) == len(FailureMode)
    for i, high in enumerate(FAILURE_PRECEDENCE):
        for low in FAILURE_PRECEDENCE[i + 1 :]:
            assert dominant_failure([low, high, low]) is high
    assert dominant_failure([FailureMode.DETECTION_FAILURE]) is FailureMode.DETECTION_FAILURE
    with pytest.raises(ValueError):
        dominant_failure([])


# ---------------------------------------------------------------------------
# geometry helpers


def test_motion_duration_is_max_joint_delta_over_cap():
    q0 = np.zeros(6)
    q1 = np.array([0.3, -0.5, 0.1, 0.0, 0.25, -0.05])
    assert motion_duration(MODEL, q0, q1) == pytest.approx(0.5 / MODEL.max_joint_velocity)
    assert motion_duration(MODEL, q1, q1) == 0.0


def test_foreign_object_in_grip_geometry():
    pose = IDENTITY_POSE  # gripper capture capsule: z in [0, 0.04], r = 0.02
    inside = scene_of(
        [], [FoliageObstacle(shape=Disk(np.array([0.01, 0.0, 0.02]), np.array([0.0, 1.0, 0.0]), 0.005), tag="leaf")]
    )
    assert foreign_object_in_grip(inside, pose)
    outside = scene_of(
        [], [FoliageObstacle(shape=Disk(np.array([0.08, 0.0, 0.02]), np.array([0.0, 1.0, 0.0]), 0.005), tag="leaf")]
    )
    assert not foreign_object_in_grip(outside, pose)
    stem = scene_of(
        [],
        [
            FoliageObstacle(
                shape=Capsule(np.array([-0.05, 0.01, 0.03]), np.array([0.05, 0.01, 0.03]), 0.004),
                tag="stem",
            )
        ],
    )
    assert foreign_object_in_grip(stem, pose)
    berries_only = scene_of([Berry(id=0, center=(0.0, 0.0, 0.02))])
    assert not foreign_object_in_grip(berries_only, pose)


# ---------------------------------------------------------------------------
# full episodes


def _run(scene, sense, planner, seed, servo=None, log=None):
    return run_state_machine(
        scene,
        MODEL,
        sensing_params=sense,
        planner_params=planner,
        servo_params=servo,
        rng=np.random.default_rng(seed),
        log=log,
    )


def test_clean_episode_reaches_with_grasp_geometry():
    scene, sense, planner, seed = clean_episode()
    result = _run(scene, sense, planner, seed)
    assert result.success
    assert result.terminal_state is ServoState.REACHED
    assert result.failure_mode is None
    assert result.reached_id == result.target_id == 0
    assert result.terminal_lateral < GRIPPER_HALF_STROKE
    assert result.terminal_forward <= 0.035 + 0.005
    assert result.terminal_forward > 0.0
    assert 5.0 <= result.reach_time <= 20.0


def test_reach_time_identity():
    scene, sense, planner, seed = clean_episode()
    result = _run(scene, sense, planner, seed)
    assert result.reach_time == pytest.approx(result.ticks * DT + result.motion_time, abs=1e-12)
    assert result.motion_time > 0.0


def test_episode_is_deterministic_including_log():
    scene, sense, planner, seed = clean_episode()
    log_a, log_b = [], []
    a = _run(scene, sense, planner, seed, log=log_a)
    b = _run(scene, sense, planner, seed, log=log_b)
    assert a.success == b.success and a.ticks == b.ticks
    assert a.reach_time == b.reach_time
    assert json.dumps(log_a) == json.dumps(log_b)


def test_one_tip_detection_per_tick():
    scene, sense, planner, seed = clean_episode()
    calls = {"tip": 0}
    real = sensing_module.detect

    def counting(scene_arg, view, lighting, rng, params=None):
        if view.role is CameraRole.TIP:
            calls["tip"] += 1
        if params is None:
            return real(scene_arg, view, lighting, rng)
        return real(scene_arg, view, lighting, rng, params)

    sensing_module.detect = counting
    try:
        result = _run(scene, sense, planner, seed)
    finally:
        sensing_module.detect = real
    assert result.success
    assert calls["tip"] == result.ticks


def test_log_transitions_follow_legal_edges():
    for seed in range(6):
        from berryreach.scene import SceneConfig, generate_lab_scene

        scene = generate_lab_scene(SceneConfig(), seed)
        log = []
        run_state_machine(scene, MODEL, rng=np.random.default_rng(100 + seed), log=log)
        transitions = [r for r in log if r["type"] == "transition"]
        assert transitions, "every episode logs at least one transition"
        for record in transitions:
            src = ServoState(record["from"])
            dst = ServoState(record["to"])
            assert dst in TRANSITIONS[src], f"illegal edge {src} -> {dst}"


def test_stowed_start_not_alterable_by_caller():
    scene, sense, planner, seed = clean_episode()
    q_start = STOW_CONFIG.copy()
    _run(scene, sense, planner, seed)
    assert np.array_equal(q_start, STOW_CONFIG)


def test_tick_budget_exhaustion_is_workspace_limit():
    scene, sense, planner, seed = clean_episode()
    result = _run(scene, sense, planner, seed, servo=ServoParams(max_ticks=3))
    assert not result.success
    assert result.failure_mode is FailureMode.WORKSPACE_LIMIT
    assert result.ticks == 3


@pytest.mark.parametrize("mode_name", sorted(SCRIPTED_FAILURES))
def test_scripted_scene_produces_mode(mode_name):
    scene, sense, planner, seed = SCRIPTED_FAILURES[mode_name]()
    result = _run(scene, sense, planner, seed)
    assert not result.success
    assert result.failure_mode is FailureMode(mode_name)


def test_detection_failure_episode_never_moves():
    scene, sense, planner, seed = SCRIPTED_FAILURES["DetectionFailure"]()
    result = _run(scene, sense, planner, seed)
    assert result.ticks == 0
    assert result.motion_time == 0.0
    assert result.target_id is None


def test_wrong_target_reaches_the_neighbour():
    scene, sense, planner, seed = wrong_target_scene()
    result = _run(scene, sense, planner, seed)
    assert result.terminal_state is ServoState.REACHED
    assert result.target_id == 0
    assert result.reached_id == 1
    assert result.causes == (FailureMode.WRONG_TARGET,)


def test_occlusion_episode_logs_brush_event():
    scene, sense, planner, seed = SCRIPTED_FAILURES["TargetOcclusion"]()
    log = []
    result = _run(scene, sense, planner, seed, log=log)
    assert result.failure_mode is FailureMode.TARGET_OCCLUSION
    kinds = {r["kind"] for r in log if r["type"] == "event"}
    assert "leaf_brush" in kinds


def test_trial_result_records_causes_tuple():
    scene, sense, planner, seed = SCRIPTED_FAILURES["EnvironmentCollision"]()
    result = _run(scene, sense, planner, seed)
    assert isinstance(result, TrialResult)
    assert isinstance(result.causes, tuple)
    assert FailureMode.ENVIRONMENT_COLLISION in result.causes
    assert result.failure_mode is dominant_failure(result.causes)
