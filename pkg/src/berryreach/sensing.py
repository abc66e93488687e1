"""Camera simulation: pinhole projection, sphere silhouettes, occlusion-aware
visibility, noisy depth, and a parametric stand-in for a learned fruit
detector.

Camera frames are right-handed with +z along the optical axis, +x toward
increasing pixel u (right), +y toward increasing pixel v (down). All
operations are pure given an explicit RNG handle, so per-trial streams
replay exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .kinematics import Pose
from .scene import Berry, ConfigError, Scene, ray_intersect, ray_intersect_batch
from .transforms import rot_x, rot_z


class BehindCamera(Exception):
    """The point has non-positive depth in the camera frame."""


class NotVisible(Exception):
    """The sphere is fully behind the camera or outside the frustum."""


class CameraRole(Enum):
    BASE = "base"
    TIP = "tip"
    DISTAL_DEPTH = "distal_depth"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("principal point must lie inside the image")

    @property
    def center(self) -> tuple[float, float]:
        return (self.cx, self.cy)


TIP_INTRINSICS = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)
BASE_INTRINSICS = CameraIntrinsics(fx=610.0, fy=610.0, cx=424.0, cy=240.0, width=848, height=480)


@dataclass(frozen=True)
class CameraView:
    pose: Pose
    intrinsics: CameraIntrinsics
    role: CameraRole


# Base camera at pan=tilt=0 looks along world +x with +z up:
# columns are the camera x (right), y (down), z (optical) axes in world.
_BASE_LEVEL_R = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)


def make_base_view(
    position: np.ndarray,
    pan: float = 0.0,
    tilt: float = 0.0,
    intrinsics: CameraIntrinsics = BASE_INTRINSICS,
) -> CameraView:
    """Pan-tilt base camera. Pan rotates about world z; positive tilt pitches
    the optical axis downward (about the camera x axis; camera y points down,
    so the camera-frame angle is negated)."""
    r = rot_z(pan) @ _BASE_LEVEL_R @ rot_x(-tilt)
    pose = Pose.from_matrix(r, np.asarray(position, dtype=float))
    return CameraView(pose=pose, intrinsics=intrinsics, role=CameraRole.BASE)


def make_tip_view(tool_pose: Pose, intrinsics: CameraIntrinsics = TIP_INTRINSICS) -> CameraView:
    """Eye-in-hand camera rigidly collocated with the tool frame."""
    return CameraView(pose=tool_pose, intrinsics=intrinsics, role=CameraRole.TIP)


def make_distal_depth_view(
    tool_pose: Pose,
    offset: Pose,
    intrinsics: CameraIntrinsics = BASE_INTRINSICS,
) -> CameraView:
    """Depth camera mounted on the final link, offset rigidly from the tool."""
    return CameraView(pose=tool_pose.compose(offset), intrinsics=intrinsics, role=CameraRole.DISTAL_DEPTH)


@dataclass(frozen=True)
class Detection:
    berry_id: int  # hidden from policy logic; used only for scoring
    bbox: tuple[float, float, float, float]  # (u_min, v_min, u_max, v_max)
    confidence: float

    @property
    def center(self) -> tuple[float, float]:
        u0, v0, u1, v1 = self.bbox
        return ((u0 + u1) / 2.0, (v0 + v1) / 2.0)

    @property
    def area(self) -> float:
        u0, v0, u1, v1 = self.bbox
        return (u1 - u0) * (v1 - v0)


@dataclass(frozen=True)
class LightingCondition:
    multiplier: float = 1.0

    def __post_init__(self) -> None:
        if self.multiplier <= 0:
            raise ConfigError("lighting multiplier must be positive")


@dataclass(frozen=True)
class DepthNoiseModel:
    sigma: float = 0.01
    dropout: float = 0.0
    bias: float = 0.0

    def __post_init__(self) -> None:
        if self.sigma < 0 or not 0.0 <= self.dropout <= 1.0:
            raise ConfigError("depth noise requires sigma >= 0 and dropout in [0, 1]")


@dataclass(frozen=True)
class DetectorParams:
    """Knobs of the parametric detector model."""

    v_min: float = 0.05  # minimum visibility fraction
    a_min: float = 16.0  # minimum clamped bbox area, px^2
    sigma_px: float = 1.0  # bbox corner jitter
    false_positive_rate: float = 0.0
    visibility_samples: int = 32
    lighting_table: tuple[tuple[float, float], ...] = ((1.0, 1.0), (13.0, 0.85), (20.0, 0.8))

    def __post_init__(self) -> None:
        xs = [x for x, _ in self.lighting_table]
        ys = [y for _, y in self.lighting_table]
        if xs != sorted(xs):
            raise ConfigError("lighting table multipliers must be sorted")
        if any(later > earlier + 1e-12 for earlier, later in zip(ys, ys[1:])):
            raise ConfigError("lighting penalty must be monotone non-increasing")
        if abs(self.lighting_table[0][1] - 1.0) > 1e-12 or self.lighting_table[0][0] != 1.0:
            raise ConfigError("lighting penalty must anchor L(1.0) = 1.0")


def lighting_penalty(lighting: LightingCondition, params: DetectorParams) -> float:
    """Piecewise-linear detection penalty vs. the intensity multiplier."""
    xs = np.array([x for x, _ in params.lighting_table])
    ys = np.array([y for _, y in params.lighting_table])
    return float(np.interp(lighting.multiplier, xs, ys))


# ---------------------------------------------------------------------------
# projection


def project_point(view: CameraView, point: np.ndarray) -> tuple[float, float]:
    """Pinhole projection of a world point; raises BehindCamera for
    non-positive depth."""
    pc = view.pose.inverse_transform_point(np.asarray(point, dtype=float))
    if pc[2] <= 0.0:
        raise BehindCamera(f"point depth {pc[2]:.4f} m is not positive")
    return (
        view.intrinsics.cx + view.intrinsics.fx * pc[0] / pc[2],
        view.intrinsics.cy + view.intrinsics.fy * pc[1] / pc[2],
    )


def pixel_ray(view: CameraView, pixel: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """World-frame (origin, unit direction) of the ray through a pixel."""
    u, v = pixel
    d_cam = np.array(
        [
            (u - view.intrinsics.cx) / view.intrinsics.fx,
            (v - view.intrinsics.cy) / view.intrinsics.fy,
            1.0,
        ]
    )
    d_world = view.pose.rotation_matrix() @ (d_cam / np.linalg.norm(d_cam))
    return view.pose.position.copy(), d_world


def _axis_extremes(a: float, c: float, radius: float) -> tuple[float, float]:
    """Extreme image-plane slopes of a circle of the given radius centered at
    (a, c) in a (lateral, depth) plane: tangent lines through the origin."""
    disc = a * a + c * c - radius * radius
    denom = c * c - radius * radius
    root = math.sqrt(disc)
    s0 = (a * c - radius * root) / denom
    s1 = (a * c + radius * root) / denom
    return (s0, s1) if s0 <= s1 else (s1, s0)


def project_sphere(view: CameraView, berry: Berry) -> tuple[float, float, float, float]:
    """Tight axis-aligned bbox of the sphere silhouette, in pixels.

    Raises NotVisible when the sphere does not produce a silhouette fully in
    front of the camera or lies entirely outside the frustum.
    """
    pc = view.pose.inverse_transform_point(berry.center)
    r = berry.radius
    if pc[2] <= r:  # behind, straddling the image plane, or beside the camera
        raise NotVisible("sphere not fully in front of the camera")
    s_u0, s_u1 = _axis_extremes(pc[0], pc[2], r)
    s_v0, s_v1 = _axis_extremes(pc[1], pc[2], r)
    intr = view.intrinsics
    bbox = (
        intr.cx + intr.fx * s_u0,
        intr.cy + intr.fy * s_v0,
        intr.cx + intr.fx * s_u1,
        intr.cy + intr.fy * s_v1,
    )
    if bbox[2] < 0 or bbox[0] > intr.width or bbox[3] < 0 or bbox[1] > intr.height:
        raise NotVisible("silhouette entirely outside the frustum")
    return bbox


def clamp_bbox(
    bbox: tuple[float, float, float, float], intrinsics: CameraIntrinsics
) -> tuple[float, float, float, float] | None:
    """Clamp a bbox to image bounds; None when nothing remains."""
    u0 = max(bbox[0], 0.0)
    v0 = max(bbox[1], 0.0)
    u1 = min(bbox[2], float(intrinsics.width))
    v1 = min(bbox[3], float(intrinsics.height))
    if u0 >= u1 or v0 >= v1:
        return None
    return (u0, v0, u1, v1)


# ---------------------------------------------------------------------------
# visibility & depth


def _hemisphere_directions(k: int) -> np.ndarray:
    """Deterministic low-discrepancy (Fibonacci) unit vectors with z >= 0."""
    i = np.arange(k) + 0.5
    z = i / k  # uniform in (0, 1]: camera-facing half only
    phi = np.pi * (1.0 + math.sqrt(5.0)) * i
    s = np.sqrt(1.0 - z * z)
    return np.column_stack([s * np.cos(phi), s * np.sin(phi), z])


def _visibility_fractions(
    scene: Scene, view: CameraView, berries: list[Berry], k: int
) -> np.ndarray:
    """visibility_fraction for several berries using one batched ray query."""
    cam = view.pose.position
    fractions = np.zeros(len(berries))
    sample_dirs = _hemisphere_directions(k)
    points, directions, exclude, rows = [], [], [], []
    for row, berry in enumerate(berries):
        w = cam - berry.center
        dist = np.linalg.norm(w)
        if dist <= berry.radius:
            continue  # camera inside the berry: fraction stays 0
        w = w / dist
        # orthonormal frame with +z toward the camera
        ref = np.array([0.0, 0.0, 1.0]) if abs(w[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(w, ref)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(w, e1)
        frame = np.column_stack([e1, e2, w])
        pts = berry.center + berry.radius * (sample_dirs @ frame.T)
        to_cam = cam - pts
        ranges = np.linalg.norm(to_cam, axis=1)
        points.append(pts)
        directions.append(to_cam / ranges[:, None])
        exclude.append(np.full(k, berry.id))
        rows.append((row, ranges))
    if not rows:
        return fractions
    kinds, _, ts = ray_intersect_batch(
        scene, np.vstack(points), np.vstack(directions), exclude_berry=np.concatenate(exclude)
    )
    for slot, (row, ranges) in enumerate(rows):
        sl = slice(slot * k, (slot + 1) * k)
        blocked = (kinds[sl] >= 0) & (ts[sl] < ranges - 1e-9)
        fractions[row] = float(np.count_nonzero(~blocked)) / k
    return fractions


def visibility_fraction(scene: Scene, view: CameraView, berry: Berry, k: int = 32) -> float:
    """Fraction of K deterministic camera-facing surface points whose rays to
    the camera are unobstructed (the berry itself never occludes)."""
    return float(_visibility_fractions(scene, view, [berry], k)[0])


def measure_depth(
    scene: Scene,
    view: CameraView,
    pixel: tuple[float, float],
    noise: DepthNoiseModel,
    rng: np.random.Generator,
) -> float | None:
    """Noisy Euclidean range along the pixel ray; None models a missing
    depth return (ray escapes the scene, or sensor dropout)."""
    if view.role not in (CameraRole.BASE, CameraRole.DISTAL_DEPTH):
        raise ConfigError("depth is only available on base or distal depth cameras")
    origin, direction = pixel_ray(view, pixel)
    hit = ray_intersect(scene, origin, direction)
    if hit is None:
        return None
    if noise.dropout > 0.0 and rng.random() < noise.dropout:
        return None
    return hit.distance + noise.bias + rng.normal(0.0, noise.sigma)


def estimate_target_position(
    view: CameraView,
    pixel: tuple[float, float],
    measured_range: float,
    berry_radius: float,
) -> np.ndarray:
    """Back-project a bbox-center depth sample to the berry center estimate.

    The depth ray returns the range to the near surface, so the nominal
    radius is added along the ray to land on the center.
    """
    origin, direction = pixel_ray(view, pixel)
    return origin + (measured_range + berry_radius) * direction


# ---------------------------------------------------------------------------
# detector model


def detect(
    scene: Scene,
    view: CameraView,
    lighting: LightingCondition,
    rng: np.random.Generator,
    params: DetectorParams = DetectorParams(),
) -> list[Detection]:
    """Parametric detector: each sufficiently-visible berry fires with
    probability visibility * L(lighting), with pixel jitter on the bbox."""
    penalty = lighting_penalty(lighting, params)
    candidates: list[tuple[Berry, tuple[float, float, float, float]]] = []
    for berry in sorted(scene.berries, key=lambda b: b.id):
        try:
            bbox = project_sphere(view, berry)
        except NotVisible:
            continue
        clamped = clamp_bbox(bbox, view.intrinsics)
        if clamped is None or (clamped[2] - clamped[0]) * (clamped[3] - clamped[1]) < params.a_min:
            continue
        candidates.append((berry, clamped))
    visibilities = _visibility_fractions(
        scene, view, [berry for berry, _ in candidates], params.visibility_samples
    )
    out: list[Detection] = []
    for (berry, clamped), vis in zip(candidates, visibilities):
        if vis < params.v_min:
            continue
        p = min(max(vis, 0.0), 1.0) * penalty
        if rng.random() >= p:
            continue
        if params.sigma_px > 0.0:
            jitter = rng.normal(0.0, params.sigma_px, 4)
            u0, v0, u1, v1 = (
                clamped[0] + jitter[0],
                clamped[1] + jitter[1],
                clamped[2] + jitter[2],
                clamped[3] + jitter[3],
            )
            bbox_j = (min(u0, u1), min(v0, v1), max(u0, u1), max(v0, v1))
            clamped = clamp_bbox(bbox_j, view.intrinsics)
            if clamped is None:
                continue
        out.append(Detection(berry_id=berry.id, bbox=clamped, confidence=float(p)))
    if params.false_positive_rate > 0.0 and rng.random() < params.false_positive_rate:
        intr = view.intrinsics
        u = rng.uniform(0.0, intr.width - 12.0)
        v = rng.uniform(0.0, intr.height - 12.0)
        w = rng.uniform(6.0, 24.0)
        fp_bbox = clamp_bbox((u, v, u + w, v + w), intr)
        if fp_bbox is not None:
            out.append(Detection(berry_id=-1, bbox=fp_bbox, confidence=0.3))
    return out


def select_target(
    detections: list[Detection], image_center: tuple[float, float]
) -> Detection | None:
    """The detection whose bbox center is nearest the image center; ties go
    to the smaller berry id for determinism."""
    if not detections:
        return None
    cx, cy = image_center
    return min(
        detections,
        key=lambda d: (math.hypot(d.center[0] - cx, d.center[1] - cy), d.berry_id),
    )
