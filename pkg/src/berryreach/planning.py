"""Initial-pose computation, approach-angle interpolation, local search, and
collision-checked joint-space motion planning.

The approach geometry lives in the vertical plane through the depth-camera
center and the berry estimate: an elevation angle interpolated from a
boundary calibration picks the approach line inside that plane, and the
candidate pose stands off from the berry along that line with the tool axis
aimed at the berry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .kinematics import ArmModel, Pose, collision_segments, solve_ik
from .scene import ConfigError, Disk, Scene
from .transforms import rotvec_to_matrix

_VERTICAL = np.array([0.0, 0.0, 1.0])

MIN_STANDOFF = 0.04  # gripper length, m


class DegenerateGeometry(Exception):
    """Camera-to-berry ray parallel to vertical: approach plane undefined."""


class OutOfHull(Exception):
    """Query outside the calibration hull; planner clamps to the hull."""


class SearchExhausted(Exception):
    """Local search ran out of candidate poses."""


class PlanFailureReason(Enum):
    WORKSPACE_LIMIT = "workspace_limit"
    COLLISION_PREDICTED = "collision_predicted"


class PlanFailure(Exception):
    def __init__(self, reason: PlanFailureReason, detail: str = ""):
        super().__init__(f"{reason.value}{': ' + detail if detail else ''}")
        self.reason = reason


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class ApproachCalibration:
    """Boundary samples (point, elevation angle) bounding the crop region."""

    points: np.ndarray  # (N, 3)
    angles: np.ndarray  # (N,)

    def __post_init__(self) -> None:
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        ang = np.asarray(self.angles, dtype=float)
        if len(pts) < 3 or len(pts) != len(ang):
            raise ConfigError("calibration needs >= 3 (point, angle) samples")
        if np.linalg.matrix_rank(pts - pts.mean(axis=0), tol=1e-9) < 2:
            raise ConfigError("calibration samples must not be collinear")
        if np.any(np.abs(ang) > np.pi / 2 + 1e-12):
            raise ConfigError("approach angles must lie within [-pi/2, pi/2]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "angles", ang)

    @property
    def _rank(self) -> int:
        return int(np.linalg.matrix_rank(self.points - self.points.mean(axis=0), tol=1e-9))

    @property
    def _interpolator(self):
        """Lazily built (and cached) Delaunay-backed linear interpolator."""
        from scipy.interpolate import LinearNDInterpolator

        cached = getattr(self, "_interp_cache", None)
        if cached is None:
            cached = LinearNDInterpolator(self.points, self.angles)
            object.__setattr__(self, "_interp_cache", cached)
        return cached


def default_calibration(model: ArmModel, max_elevation: float = math.radians(45.0)) -> ApproachCalibration:
    """16-point cage around the reachable crop band.

    Two rings of four azimuths at two heights; the outer ring is padded past
    the reach envelope so the crop band interpolates rather than clamps.
    Elevation at each sample is atan2(height above shoulder, horizontal
    distance), clamped, which approaches high berries from below-front and
    low berries from above-front.
    """
    shoulder = model.shoulder_position()
    azimuths = [math.radians(a) for a in (-45.0, -15.0, 15.0, 45.0)]
    heights = (-0.10, 0.16)
    points = []
    angles = []
    for radial in (0.18, 0.50):
        for dz in heights:
            for az in azimuths:
                p = shoulder + np.array(
                    [radial * math.cos(az), radial * math.sin(az), dz]
                )
                points.append(p)
                angles.append(
                    float(np.clip(math.atan2(dz, radial), -max_elevation, max_elevation))
                )
    return ApproachCalibration(points=np.array(points), angles=np.array(angles))


def _plane_coords(calibration: ApproachCalibration) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """2D coordinates of rank-2 sample sets (basis from SVD)."""
    mean = calibration.points.mean(axis=0)
    _, _, vt = np.linalg.svd(calibration.points - mean)
    basis = vt[:2]
    return (calibration.points - mean) @ basis.T, basis, mean


def interpolate_approach_angle(calibration: ApproachCalibration, estimate: np.ndarray) -> float:
    """Linear (barycentric) interpolation of boundary angles at the estimate.

    Raises OutOfHull when the estimate is not contained by the convex hull of
    the calibration points.
    """
    from scipy.interpolate import LinearNDInterpolator

    q = np.asarray(estimate, dtype=float)
    if calibration._rank >= 3:
        value = calibration._interpolator(q).item()
    else:
        coords, basis, mean = _plane_coords(calibration)
        offset = q - mean
        if abs(np.linalg.norm(offset - basis.T @ (basis @ offset))) > 1e-9:
            raise OutOfHull("estimate off the calibration plane")
        interp = LinearNDInterpolator(coords, calibration.angles)
        value = interp(basis @ offset).item()
    if math.isnan(value):
        raise OutOfHull("estimate outside the calibration hull")
    return value


def clamp_to_hull(calibration: ApproachCalibration, estimate: np.ndarray) -> np.ndarray:
    """Nearest in-hull point: bisect along the ray toward the sample centroid."""
    q = np.asarray(estimate, dtype=float)
    centroid = calibration.points.mean(axis=0)

    def inside(p: np.ndarray) -> bool:
        try:
            interpolate_approach_angle(calibration, p)
            return True
        except OutOfHull:
            return False

    if inside(q):
        return q
    lo, hi = 0.0, 1.0  # fraction of the way toward the centroid
    if not inside(centroid):  # pathological; fall back to the centroid itself
        return centroid
    for _ in range(60):
        mid = (lo + hi) / 2.0
        if inside(q + mid * (centroid - q)):
            hi = mid
        else:
            lo = mid
    return q + hi * (centroid - q)


# ---------------------------------------------------------------------------
# approach geometry


@dataclass(frozen=True)
class ApproachPlane:
    point: np.ndarray  # the berry estimate
    u: np.ndarray  # horizontal unit vector toward the berry
    v: np.ndarray  # world vertical
    normal: np.ndarray


def approach_plane(camera_position: np.ndarray, estimate: np.ndarray) -> ApproachPlane:
    """Vertical plane containing the camera-to-berry vector."""
    camera_position = np.asarray(camera_position, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    horizontal = estimate - camera_position
    horizontal = horizontal - (horizontal @ _VERTICAL) * _VERTICAL
    norm = np.linalg.norm(horizontal)
    if norm < 1e-9:
        raise DegenerateGeometry("camera-to-berry vector is vertical")
    u = horizontal / norm
    normal = np.cross(u, _VERTICAL)
    return ApproachPlane(point=estimate, u=u, v=_VERTICAL.copy(), normal=normal)


@dataclass(frozen=True)
class CandidatePose:
    pose: Pose
    offset: float
    search_index: int = 0

    def __post_init__(self) -> None:
        if self.offset < MIN_STANDOFF - 1e-12:
            raise ConfigError(f"offset {self.offset} below minimum standoff {MIN_STANDOFF}")

    @property
    def aim_point(self) -> np.ndarray:
        """Where the tool axis intersects the approach line (the estimate)."""
        return self.pose.position + self.offset * self.pose.z_axis()


def _aim_orientation(direction: np.ndarray) -> np.ndarray:
    """Tool rotation with +z (optical axis) along `direction`, camera x held
    horizontal ("right" as seen looking along the approach with z up)."""
    z = direction / np.linalg.norm(direction)
    x = np.cross(z, _VERTICAL)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise DegenerateGeometry("approach direction is vertical")
    x = x / nx
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def compute_initial_pose(
    calibration: ApproachCalibration,
    camera_position: np.ndarray,
    estimate: np.ndarray,
    offset: float = 0.12,
    *,
    clamp_out_of_hull: bool = False,
) -> CandidatePose:
    """Stand-off pose on the interpolated approach line, aimed at the berry."""
    if offset < MIN_STANDOFF:
        raise ConfigError(f"offset must be >= {MIN_STANDOFF} m")
    plane = approach_plane(camera_position, estimate)
    try:
        elevation = interpolate_approach_angle(calibration, estimate)
    except OutOfHull:
        if not clamp_out_of_hull:
            raise
        elevation = interpolate_approach_angle(calibration, clamp_to_hull(calibration, estimate))
    approach_dir = math.cos(elevation) * plane.u + math.sin(elevation) * plane.v
    position = np.asarray(estimate, dtype=float) - offset * approach_dir
    pose = Pose.from_matrix(_aim_orientation(approach_dir), position)
    return CandidatePose(pose=pose, offset=offset, search_index=0)


@dataclass(frozen=True)
class LocalSearchParams:
    yaw_step: float = math.radians(15.0)
    pitch_step: float = math.radians(15.0)
    steps_per_side: int = 1
    offset_increment: float = 0.04
    max_offset: float = 0.20


def local_search_sequence(
    initial: CandidatePose, params: LocalSearchParams = LocalSearchParams()
) -> list[CandidatePose]:
    """Deterministic candidate ladder: at each offset level the unrotated
    pose, then yaw left/right about the vertical through the tool point,
    then pitch down/up within the approach plane; offsets escalate to
    max_offset."""
    anchor = initial.aim_point  # the berry estimate
    r0 = initial.pose.rotation_matrix()
    z0 = initial.pose.z_axis()
    pitch_axis = np.cross(z0, _VERTICAL)
    pitch_axis /= np.linalg.norm(pitch_axis)

    offsets = []
    offset = initial.offset
    while offset <= params.max_offset + 1e-12:
        offsets.append(offset)
        offset += params.offset_increment

    out: list[CandidatePose] = []
    index = 0
    for level_offset in offsets:
        position = anchor - level_offset * z0
        rotations: list[np.ndarray] = [np.eye(3)]
        for s in range(1, params.steps_per_side + 1):
            rotations.append(rotvec_to_matrix(-s * params.yaw_step * _VERTICAL))
            rotations.append(rotvec_to_matrix(s * params.yaw_step * _VERTICAL))
        for s in range(1, params.steps_per_side + 1):
            rotations.append(rotvec_to_matrix(-s * params.pitch_step * pitch_axis))
            rotations.append(rotvec_to_matrix(s * params.pitch_step * pitch_axis))
        for rot in rotations:
            pose = Pose.from_matrix(rot @ r0, position)
            out.append(CandidatePose(pose=pose, offset=level_offset, search_index=index))
            index += 1
    return out


# ---------------------------------------------------------------------------
# collision checking


@dataclass(frozen=True)
class Contact:
    kind: str  # "berry" | "obstacle" | "self"
    index: int  # berry/obstacle index, or the second link for self contacts
    link: int  # arm capsule index
    distance: float  # signed surface separation (negative = penetration)


COLLISION_MARGIN = 0.005
# target berries this close to the tool point are being enveloped, not hit
GRASP_EXCLUSION_RADIUS = 0.075

_SELF_CHECK_PAIRS = ((0, 2), (0, 3), (0, 4), (1, 3), (1, 4), (2, 4))
_SELF_PAIR_I = np.array([p[0] for p in _SELF_CHECK_PAIRS])
_SELF_PAIR_J = np.array([p[1] for p in _SELF_CHECK_PAIRS])


def _segment_point_distances(a: np.ndarray, b: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Distances from each point (N,3) to segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-16:
        return np.linalg.norm(points - a, axis=1)
    s = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + s[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def _segment_points_grid(a0: np.ndarray, a1: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Distances from each point (N,3) to each segment (L,3)->(L,3), as (L,N).

    Degenerate segments collapse to their start point (s clamps to 0)."""
    ab = a1 - a0  # (L,3)
    denom = np.maximum(np.einsum("lk,lk->l", ab, ab), 1e-16)
    rel = points[None, :, :] - a0[:, None, :]  # (L,N,3)
    s = np.clip(np.einsum("lnk,lk->ln", rel, ab) / denom[:, None], 0.0, 1.0)
    closest = rel - s[:, :, None] * ab[:, None, :]
    return np.linalg.norm(closest, axis=2)


def _segment_segment_distance(a0, a1, b0, b1) -> float:
    """Closed-form minimum distance between two segments."""
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    a = float(d1 @ d1)
    e = float(d2 @ d2)
    f = float(d2 @ r)
    if a < 1e-16 and e < 1e-16:
        return float(np.linalg.norm(r))
    if a < 1e-16:
        s, t = 0.0, np.clip(f / e, 0.0, 1.0)
    else:
        c = float(d1 @ r)
        if e < 1e-16:
            t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
        else:
            b = float(d1 @ d2)
            denom = a * e - b * b
            s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 1e-16 else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
            elif t > 1.0:
                t, s = 1.0, np.clip((b - c) / a, 0.0, 1.0)
    closest1 = a0 + s * d1
    closest2 = b0 + t * d2
    return float(np.linalg.norm(closest1 - closest2))


def _segment_segment_distance_pairs(a0, a1, b0, b1) -> np.ndarray:
    """Elementwise segment-segment distances for aligned pairs (P,3) arrays
    (same clamped closed form as the scalar version, batched)."""
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    a = np.einsum("pk,pk->p", d1, d1)
    e = np.einsum("pk,pk->p", d2, d2)
    f = np.einsum("pk,pk->p", d2, r)
    c = np.einsum("pk,pk->p", d1, r)
    b = np.einsum("pk,pk->p", d1, d2)
    a_safe = np.maximum(a, 1e-16)
    e_safe = np.maximum(e, 1e-16)
    denom = a * e - b * b
    s = np.where(denom > 1e-16, np.clip((b * f - c * e) / np.maximum(denom, 1e-16), 0.0, 1.0), 0.0)
    t = (b * s + f) / e_safe
    t_clamped = np.clip(t, 0.0, 1.0)
    s = np.where(t == t_clamped, s, np.clip((b * t_clamped - c) / a_safe, 0.0, 1.0))
    p1 = a0 + s[:, None] * d1
    p2 = b0 + t_clamped[:, None] * d2
    return np.linalg.norm(p1 - p2, axis=1)


def _segment_segment_distance_grid(a0, a1, b0, b1) -> np.ndarray:
    """Pairwise segment-segment distances, (L, C) for L arm segments and C
    scene capsule axes (vectorized form of the clamped closed-form)."""
    d1 = a1 - a0  # (L,3)
    d2 = b1 - b0  # (C,3)
    r = a0[:, None, :] - b0[None, :, :]  # (L,C,3)
    a = np.einsum("lk,lk->l", d1, d1)[:, None]  # (L,1)
    e = np.einsum("ck,ck->c", d2, d2)[None, :]  # (1,C)
    f = np.einsum("ck,lck->lc", d2, r)
    c = np.einsum("lk,lck->lc", d1, r)
    b = np.einsum("lk,ck->lc", d1, d2)
    a_safe = np.maximum(a, 1e-16)
    e_safe = np.maximum(e, 1e-16)
    denom = a * e - b * b
    s = np.where(denom > 1e-16, np.clip((b * f - c * e) / np.maximum(denom, 1e-16), 0.0, 1.0), 0.0)
    t = (b * s + f) / e_safe
    t_clamped = np.clip(t, 0.0, 1.0)
    s = np.where(t == t_clamped, s, np.clip((b * t_clamped - c) / a_safe, 0.0, 1.0))
    p1 = a0[:, None, :] + s[:, :, None] * d1[:, None, :]
    p2 = b0[None, :, :] + t_clamped[:, :, None] * d2[None, :, :]
    return np.linalg.norm(p1 - p2, axis=2)


def _segment_disk_distance(a: np.ndarray, b: np.ndarray, disk: Disk) -> float:
    """Minimum distance from segment to disk via ternary search (the distance
    to a convex set along an affine path is convex in the path parameter).

    The point-to-disk distance along p(t) = a + t(b-a) reduces to scalar
    quadratics in t: the axial offset is linear and the squared in-plane
    radius is |p-c|^2 minus the axial part, so each probe is pure float math.
    """
    cx, cy, cz = float(disk.center[0]), float(disk.center[1]), float(disk.center[2])
    nx, ny, nz = float(disk.normal[0]), float(disk.normal[1]), float(disk.normal[2])
    radius = float(disk.radius)
    ux, uy, uz = float(a[0]) - cx, float(a[1]) - cy, float(a[2]) - cz
    vx, vy, vz = float(b[0]) - float(a[0]), float(b[1]) - float(a[1]), float(b[2]) - float(a[2])
    un = ux * nx + uy * ny + uz * nz
    vn = vx * nx + vy * ny + vz * nz
    uu = ux * ux + uy * uy + uz * uz
    uv = ux * vx + uy * vy + uz * vz
    vv = vx * vx + vy * vy + vz * vz

    def dist(t: float) -> float:
        dz = un + t * vn
        rho_sq = uu + t * (2.0 * uv + t * vv) - dz * dz
        rho = math.sqrt(rho_sq) if rho_sq > 0.0 else 0.0
        outside = rho - radius
        if outside <= 0.0:
            return abs(dz)
        return math.hypot(dz, outside)

    lo, hi = 0.0, 1.0
    for _ in range(80):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if dist(m1) <= dist(m2):
            hi = m2
        else:
            lo = m1
    return dist((lo + hi) / 2.0)


def check_collision(
    model: ArmModel,
    scene: Scene,
    q: np.ndarray,
    margin: float = COLLISION_MARGIN,
) -> list[Contact]:
    """Analytic arm-vs-scene and arm self-collision contacts at config q.

    Berries within the grasp-exclusion sphere of the tool point are being
    enveloped by the gripper and do not register contacts.
    """
    seg_p0, seg_p1, seg_radii = collision_segments(model, q)
    tool = seg_p0[4]  # tool frame origin: start of the gripper capsule
    contacts: list[Contact] = []

    sphere_centers, sphere_radii = scene._sphere_arrays
    if len(sphere_radii):
        enveloped = np.linalg.norm(sphere_centers - tool, axis=1) <= GRASP_EXCLUSION_RADIUS
        d = (
            _segment_points_grid(seg_p0, seg_p1, sphere_centers)
            - seg_radii[:, None]
            - sphere_radii[None, :]
        )
        for link, i in zip(*np.nonzero((d < margin) & ~enveloped[None, :])):
            contacts.append(
                Contact(kind="berry", index=int(i), link=int(link), distance=float(d[link, i]))
            )

    disk_idx, d_centers, d_normals, d_radii = scene._disk_arrays
    if len(d_radii):
        # cheap lower bound prunes far disks: the disk lies within its
        # bounding sphere, so dist >= dist(segment, center) - disk radius
        lower = (
            _segment_points_grid(seg_p0, seg_p1, d_centers)
            - d_radii[None, :]
            - seg_radii[:, None]
        )
        for link, i in zip(*np.nonzero(lower < margin)):
            disk = Disk(center=d_centers[i], normal=d_normals[i], radius=float(d_radii[i]))
            d = _segment_disk_distance(seg_p0[link], seg_p1[link], disk) - seg_radii[link]
            if d < margin:
                contacts.append(
                    Contact(kind="obstacle", index=int(disk_idx[i]), link=int(link), distance=float(d))
                )

    cap_idx, c_p0, c_p1, c_radii = scene._capsule_arrays
    if len(c_radii):
        grid = (
            _segment_segment_distance_grid(seg_p0, seg_p1, c_p0, c_p1)
            - seg_radii[:, None]
            - c_radii[None, :]
        )
        for link, i in zip(*np.nonzero(grid < margin)):
            contacts.append(
                Contact(
                    kind="obstacle",
                    index=int(cap_idx[i]),
                    link=int(link),
                    distance=float(grid[link, i]),
                )
            )

    d_self = (
        _segment_segment_distance_pairs(
            seg_p0[_SELF_PAIR_I], seg_p1[_SELF_PAIR_I], seg_p0[_SELF_PAIR_J], seg_p1[_SELF_PAIR_J]
        )
        - seg_radii[_SELF_PAIR_I]
        - seg_radii[_SELF_PAIR_J]
    )
    for k in np.nonzero(d_self < margin)[0]:
        contacts.append(
            Contact(
                kind="self",
                index=int(_SELF_PAIR_J[k]),
                link=int(_SELF_PAIR_I[k]),
                distance=float(d_self[k]),
            )
        )
    return contacts


# ---------------------------------------------------------------------------
# motion planning


@dataclass(frozen=True)
class PlanResult:
    trajectory: list
    collision_checked: bool = True


MAX_JOINT_STEP = 0.02  # rad, per interpolated waypoint


def plan_motion(
    model: ArmModel,
    scene: Scene,
    q_start: np.ndarray,
    target: CandidatePose | Pose,
    margin: float = COLLISION_MARGIN,
) -> PlanResult:
    """Joint-space straight-line plan to the target pose, collision-checked
    at every interpolated waypoint. Raises PlanFailure on IK failure or any
    predicted contact."""
    pose = target.pose if isinstance(target, CandidatePose) else target
    q_start = np.asarray(q_start, dtype=float)
    q_goal = solve_ik(model, pose, seed=q_start)
    if q_goal is None:
        raise PlanFailure(PlanFailureReason.WORKSPACE_LIMIT, "no IK solution for target pose")
    delta = q_goal - q_start
    steps = max(1, int(math.ceil(np.max(np.abs(delta)) / MAX_JOINT_STEP)))
    trajectory = [q_start + (s / steps) * delta for s in range(steps + 1)]
    if np.max(np.abs(delta)) < 1e-12:
        trajectory = [q_start]
    for q in trajectory:
        contacts = check_collision(model, scene, q, margin)
        if contacts:
            worst = min(contacts, key=lambda c: c.distance)
            raise PlanFailure(
                PlanFailureReason.COLLISION_PREDICTED,
                f"{worst.kind}[{worst.index}] vs link {worst.link} at {worst.distance:.4f} m",
            )
    return PlanResult(trajectory=trajectory, collision_checked=True)
