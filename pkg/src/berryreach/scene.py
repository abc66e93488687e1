"""Synthetic plant worlds: berries, foliage occluders and row geometry.

Scenes are generated deterministically from (config, seed), are immutable
afterwards, and support exact analytic ray casting against spheres (berries),
flat disks (leaves) and capsules (stems/vines). Units are meters in a
right-handed z-up world frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property

import numpy as np

_T_EPS = 1e-9


class ConfigError(ValueError):
    """Invalid or infeasible scenario configuration."""


class PlacementClass(Enum):
    PERIPHERY = "periphery"
    UNDER_CANOPY = "under_canopy"


@dataclass(frozen=True, eq=False)
class Berry:
    id: int
    center: np.ndarray
    radius: float = 0.015
    placement: PlacementClass = PlacementClass.PERIPHERY

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if not self.radius > 0.0:
            raise ConfigError("berry radius must be positive")


@dataclass(frozen=True, eq=False)
class Disk:
    center: np.ndarray
    normal: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm <= 0.0 or not self.radius > 0.0:
            raise ConfigError("disk requires nonzero normal and positive radius")
        if abs(norm - 1.0) > 1e-12:  # keep already-unit normals bit-stable
            n = n / norm
        object.__setattr__(self, "normal", n)


@dataclass(frozen=True, eq=False)
class Capsule:
    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=float))
        object.__setattr__(self, "p1", np.asarray(self.p1, dtype=float))
        if not self.radius > 0.0:
            raise ConfigError("capsule radius must be positive")
        if np.linalg.norm(self.p1 - self.p0) <= 1e-9:
            raise ConfigError("capsule endpoints must be distinct")


@dataclass(frozen=True, eq=False)
class FoliageObstacle:
    shape: Disk | Capsule
    tag: str  # leaf | stem | vine


@dataclass(frozen=True, eq=False)
class RayHit:
    kind: str  # "berry" | "obstacle"
    index: int
    distance: float


@dataclass(frozen=True)
class SceneConfig:
    """Geometry knobs shared by all scenario generators.

    Bands are (low, high) tuples; radial distances are measured from the
    robot base axis in the xy plane.
    """

    kind: str = "lab"
    berry_count: int = 6
    berry_radius: float = 0.015
    radial_band: tuple[float, float] = (0.30, 0.45)
    height_band: tuple[float, float] = (0.16, 0.34)
    azimuth_band: tuple[float, float] = (-0.7, 0.7)
    periphery_fraction: float = 0.6
    min_berry_separation: float = 0.05
    robot_base: tuple[float, float, float] = (0.0, 0.0, 0.12)
    camera_hint: tuple[float, float, float] = (-0.08, 0.0, 0.45)
    leaf_radius: float = 0.04
    stem_radius: float = 0.005
    shroud_leaves: tuple[int, int] = (2, 5)
    shroud_distance: float = 0.12
    shroud_gap_probability: float = 0.55
    shroud_gap_offset: tuple[float, float] = (0.068, 0.095)
    shroud_block_offset: tuple[float, float] = (0.0, 0.022)
    ambient_leaves: int = 6
    ambient_stems: int = 3
    obstacle_clearance: float = 0.065
    # hanging-vine scenario
    vine_count: int = 4
    vine_top: float = 0.52
    vine_bottom: float = 0.14
    vine_attach_radius: float = 0.035
    vine_leaves_per_vine: int = 3
    # high-tunnel scenario
    row_spacing: float = 1.0
    row_spacing_band: tuple[float, float] = (0.91, 1.22)
    allow_spacing_override: bool = False
    outer_foliage_removed: bool = True
    row_length: float = 1.2
    row_stems: int = 6


@dataclass(frozen=True, eq=False)
class Scene:
    berries: tuple[Berry, ...]
    obstacles: tuple[FoliageObstacle, ...]
    robot_base: np.ndarray
    corridor_width: float | None
    seed: int
    scenario: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "robot_base", np.asarray(self.robot_base, dtype=float))

    # cached primitive arrays for vectorized queries ---------------------

    @cached_property
    def _sphere_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.berries:
            return np.zeros((0, 3)), np.zeros(0)
        return (
            np.array([b.center for b in self.berries]),
            np.array([b.radius for b in self.berries]),
        )

    @cached_property
    def _sphere_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.berries], dtype=int)

    @cached_property
    def _disk_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        idx = [i for i, o in enumerate(self.obstacles) if isinstance(o.shape, Disk)]
        if not idx:
            return np.zeros(0, dtype=int), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
        shapes = [self.obstacles[i].shape for i in idx]
        return (
            np.array(idx, dtype=int),
            np.array([s.center for s in shapes]),
            np.array([s.normal for s in shapes]),
            np.array([s.radius for s in shapes]),
        )

    @cached_property
    def _capsule_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        idx = [i for i, o in enumerate(self.obstacles) if isinstance(o.shape, Capsule)]
        if not idx:
            return np.zeros(0, dtype=int), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
        shapes = [self.obstacles[i].shape for i in idx]
        return (
            np.array(idx, dtype=int),
            np.array([s.p0 for s in shapes]),
            np.array([s.p1 for s in shapes]),
            np.array([s.radius for s in shapes]),
        )

    def with_replaced_obstacle(self, index: int, obstacle: FoliageObstacle) -> "Scene":
        """Copy of the scene with one obstacle swapped (used for the
        leaf-brush occlusion event; the original stays immutable)."""
        obstacles = list(self.obstacles)
        obstacles[index] = obstacle
        return replace(self, obstacles=tuple(obstacles))


# ---------------------------------------------------------------------------
# ray casting


def ray_intersect_batch(
    scene: Scene,
    origins: np.ndarray,
    directions: np.ndarray,
    exclude_berry: int | np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest positive-t hits for a batch of rays.

    Returns (kind (N,) int8: -1 miss / 0 berry / 1 obstacle, index (N,),
    distance (N,)). Directions must be unit length. ``exclude_berry`` masks a
    berry id out of the sphere pass, either one id for every ray or an (N,)
    array giving each ray its own id (-1 excludes nothing for that ray).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_kind = np.full(n, -1, dtype=np.int8)
    best_idx = np.full(n, -1, dtype=int)

    centers, radii = scene._sphere_arrays
    if len(radii):
        oc = origins[:, None, :] - centers[None, :, :]  # (N,S,3)
        b = 2.0 * np.einsum("nsk,nk->ns", oc, directions)
        c = np.einsum("nsk,nsk->ns", oc, oc) - radii[None, :] ** 2
        disc = b * b - 4.0 * c
        valid = disc >= 0.0
        sq = np.sqrt(np.where(valid, disc, 0.0))
        t0 = (-b - sq) / 2.0
        t1 = (-b + sq) / 2.0
        t = np.where(t0 > _T_EPS, t0, np.where(t1 > _T_EPS, t1, np.inf))
        t = np.where(valid, t, np.inf)
        if exclude_berry is not None:
            excluded = np.asarray(exclude_berry, dtype=int)
            if excluded.ndim == 0:
                t[:, scene._sphere_ids == int(excluded)] = np.inf
            else:
                t[excluded[:, None] == scene._sphere_ids[None, :]] = np.inf
        idx = np.argmin(t, axis=1)
        tmin = t[np.arange(n), idx]
        better = tmin < best_t
        best_t[better] = tmin[better]
        best_kind[better] = 0
        best_idx[better] = idx[better]

    disk_idx, d_centers, d_normals, d_radii = scene._disk_arrays
    if len(d_radii):
        denom = directions @ d_normals.T  # (N,D)
        num = np.einsum("dk,ndk->nd", d_normals, d_centers[None, :, :] - origins[:, None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        t = np.where(np.abs(denom) < 1e-12, np.inf, t)
        t = np.where(t > _T_EPS, t, np.inf)
        finite = np.isfinite(t)
        t_safe = np.where(finite, t, 0.0)
        hit = origins[:, None, :] + t_safe[:, :, None] * directions[:, None, :]
        in_disk = np.zeros_like(t, dtype=bool)
        if finite.any():
            delta = np.where(finite[:, :, None], hit - d_centers[None, :, :], 0.0)
            in_disk = np.einsum("ndk,ndk->nd", delta, delta) <= (d_radii[None, :] ** 2) + 1e-18
        t = np.where(finite & in_disk, t, np.inf)
        idx = np.argmin(t, axis=1)
        tmin = t[np.arange(n), idx]
        better = tmin < best_t
        best_t[better] = tmin[better]
        best_kind[better] = 1
        best_idx[better] = disk_idx[idx[better]]

    cap_idx, p0, p1, c_radii = scene._capsule_arrays
    if len(c_radii):
        axis = p1 - p0  # (C,3)
        length = np.linalg.norm(axis, axis=1)
        u = axis / length[:, None]
        t_best_caps = np.full((n, len(c_radii)), np.inf)
        # sphere caps
        for cap_pts in (p0, p1):
            oc = origins[:, None, :] - cap_pts[None, :, :]
            b = 2.0 * np.einsum("nck,nk->nc", oc, directions)
            c = np.einsum("nck,nck->nc", oc, oc) - c_radii[None, :] ** 2
            disc = b * b - 4.0 * c
            valid = disc >= 0.0
            sq = np.sqrt(np.where(valid, disc, 0.0))
            t0 = (-b - sq) / 2.0
            t1 = (-b + sq) / 2.0
            t = np.where(t0 > _T_EPS, t0, np.where(t1 > _T_EPS, t1, np.inf))
            t = np.where(valid, t, np.inf)
            t_best_caps = np.minimum(t_best_caps, t)
        # cylinder body
        o_rel = origins[:, None, :] - p0[None, :, :]  # (N,C,3)
        d_dot_u = np.einsum("nk,ck->nc", directions, u)
        o_dot_u = np.einsum("nck,ck->nc", o_rel, u)
        d_perp = directions[:, None, :] - d_dot_u[:, :, None] * u[None, :, :]
        o_perp = o_rel - o_dot_u[:, :, None] * u[None, :, :]
        a = np.einsum("nck,nck->nc", d_perp, d_perp)
        b = 2.0 * np.einsum("nck,nck->nc", d_perp, o_perp)
        c = np.einsum("nck,nck->nc", o_perp, o_perp) - c_radii[None, :] ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = b * b - 4.0 * a * c
            valid = (a > 1e-16) & (disc >= 0.0)
            sq = np.sqrt(np.where(valid, disc, 0.0))
            for sign in (-1.0, 1.0):
                t = np.where(valid, (-b + sign * sq) / (2.0 * a), np.inf)
                s = o_dot_u + t * d_dot_u
                ok = (t > _T_EPS) & (s >= 0.0) & (s <= length[None, :])
                t = np.where(ok, t, np.inf)
                t_best_caps = np.minimum(t_best_caps, t)
        idx = np.argmin(t_best_caps, axis=1)
        tmin = t_best_caps[np.arange(n), idx]
        better = tmin < best_t
        best_t[better] = tmin[better]
        best_kind[better] = 1
        best_idx[better] = cap_idx[idx[better]]

    return best_kind, best_idx, best_t


def ray_intersect(scene: Scene, origin: np.ndarray, direction: np.ndarray) -> RayHit | None:
    """Nearest positive-t hit of a single unit-direction ray, or None."""
    kind, idx, t = ray_intersect_batch(scene, origin[None, :], direction[None, :])
    if kind[0] < 0:
        return None
    return RayHit(kind="berry" if kind[0] == 0 else "obstacle", index=int(idx[0]), distance=float(t[0]))


# ---------------------------------------------------------------------------
# generators


def _periphery_count(n: int, fraction: float) -> int:
    # round half toward periphery
    return int(np.floor(n * fraction + 0.5))


def _validate_common(config: SceneConfig) -> None:
    if config.berry_count < 0:
        raise ConfigError("berry_count must be non-negative")
    if not 0.0 <= config.periphery_fraction <= 1.0:
        raise ConfigError("periphery_fraction must be within [0, 1]")
    if config.radial_band[0] >= config.radial_band[1]:
        raise ConfigError("radial band must be non-empty")
    if config.height_band[0] >= config.height_band[1]:
        raise ConfigError("height band must be non-empty")


def _sample_berry_position(config: SceneConfig, rng: np.random.Generator,
                           radial: tuple[float, float] | None = None) -> np.ndarray:
    band = radial if radial is not None else config.radial_band
    r = rng.uniform(*band)
    az = rng.uniform(*config.azimuth_band)
    z = rng.uniform(*config.height_band)
    base = np.asarray(config.robot_base, dtype=float)
    return np.array([base[0] + r * np.cos(az), base[1] + r * np.sin(az), z])


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    s = 0.0 if denom < 1e-16 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + s * ab)))


def _point_disk_distance(p: np.ndarray, disk: Disk) -> float:
    dz = float((p - disk.center) @ disk.normal)
    in_plane = (p - disk.center) - dz * disk.normal
    rho = float(np.linalg.norm(in_plane))
    if rho <= disk.radius:
        return abs(dz)
    return float(np.hypot(dz, rho - disk.radius))


def _obstacle_berry_distance(shape: Disk | Capsule, berry_center: np.ndarray) -> float:
    if isinstance(shape, Disk):
        return _point_disk_distance(berry_center, shape)
    return _point_segment_distance(berry_center, shape.p0, shape.p1)


def _perpendicular_unit(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    ref = np.array([0.0, 0.0, 1.0]) if abs(v[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(v, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(v, e1)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return np.cos(angle) * e1 + np.sin(angle) * e2


def _shroud_leaves(
    config: SceneConfig,
    rng: np.random.Generator,
    berry_center: np.ndarray,
    toward: np.ndarray,
    berries: list[Berry],
) -> list[FoliageObstacle]:
    """Leaves in the cone between a canopy berry and the base camera.

    With probability shroud_gap_probability the leaves are pushed laterally
    off the line of sight, leaving the berry detectable.
    """
    count = int(rng.integers(config.shroud_leaves[0], config.shroud_leaves[1] + 1))
    gap = rng.random() < config.shroud_gap_probability
    w = toward - berry_center
    w = w / np.linalg.norm(w)
    leaves: list[FoliageObstacle] = []
    for _ in range(count):
        for _attempt in range(60):
            depth = rng.uniform(0.03, min(0.10, config.shroud_distance - 0.01))
            lateral_band = config.shroud_gap_offset if gap else config.shroud_block_offset
            lateral = rng.uniform(*lateral_band)
            center = berry_center + depth * w + lateral * _perpendicular_unit(w, rng)
            normal = w + rng.normal(0.0, 0.15, 3)
            disk = Disk(center=center, normal=normal, radius=config.leaf_radius)
            ok = all(
                _point_disk_distance(b.center, disk) > b.radius + 1e-3 for b in berries
            )
            if ok:
                leaves.append(FoliageObstacle(shape=disk, tag="leaf"))
                break
    return leaves


def _place_berries(
    config: SceneConfig,
    rng: np.random.Generator,
    n_periphery: int,
    n_canopy: int,
    periphery_radial: tuple[float, float] | None = None,
    canopy_radial: tuple[float, float] | None = None,
) -> list[Berry]:
    berries: list[Berry] = []
    classes = [PlacementClass.PERIPHERY] * n_periphery + [PlacementClass.UNDER_CANOPY] * n_canopy
    for i, placement in enumerate(classes):
        radial = periphery_radial if placement is PlacementClass.PERIPHERY else canopy_radial
        for _attempt in range(400):
            center = _sample_berry_position(config, rng, radial)
            if all(
                np.linalg.norm(center - b.center) >= config.min_berry_separation
                for b in berries
            ):
                berries.append(
                    Berry(id=i, center=center, radius=config.berry_radius, placement=placement)
                )
                break
        else:
            raise ConfigError("could not place berries with the configured separation")
    return berries


def generate_lab_scene(config: SceneConfig, seed: int) -> Scene:
    """Tabletop artificial plant: berries in a radial band around the robot,
    periphery/under-canopy split exact for the requested count."""
    _validate_common(config)
    rng = np.random.default_rng(seed)
    n_per = _periphery_count(config.berry_count, config.periphery_fraction)
    n_can = config.berry_count - n_per
    berries = _place_berries(config, rng, n_per, n_can)

    camera_hint = np.asarray(config.camera_hint, dtype=float)
    obstacles: list[FoliageObstacle] = []
    for berry in berries:
        if berry.placement is PlacementClass.UNDER_CANOPY:
            obstacles.extend(_shroud_leaves(config, rng, berry.center, camera_hint, berries))

    # ambient clutter, kept clear of every berry
    for _ in range(config.ambient_leaves):
        for _attempt in range(80):
            center = _sample_berry_position(config, rng)
            center += rng.normal(0.0, 0.02, 3)
            disk = Disk(center=center, normal=rng.normal(0.0, 1.0, 3), radius=config.leaf_radius)
            if all(
                _point_disk_distance(b.center, disk) > config.obstacle_clearance for b in berries
            ):
                obstacles.append(FoliageObstacle(shape=disk, tag="leaf"))
                break
    for _ in range(config.ambient_stems):
        for _attempt in range(80):
            r = rng.uniform(config.radial_band[0] + 0.03, config.radial_band[1] + 0.04)
            az = rng.uniform(*config.azimuth_band)
            base = np.asarray(config.robot_base, dtype=float)
            x, y = base[0] + r * np.cos(az), base[1] + r * np.sin(az)
            p0 = np.array([x, y, config.height_band[0] - 0.06])
            p1 = np.array([x, y, config.height_band[1] + 0.06]) + rng.normal(0.0, 0.015, 3)
            cap = Capsule(p0=p0, p1=p1, radius=config.stem_radius)
            if all(
                _point_segment_distance(b.center, cap.p0, cap.p1)
                > config.obstacle_clearance for b in berries
            ):
                obstacles.append(FoliageObstacle(shape=cap, tag="stem"))
                break

    return Scene(
        berries=tuple(berries),
        obstacles=tuple(obstacles),
        robot_base=np.asarray(config.robot_base, dtype=float),
        corridor_width=None,
        seed=int(seed),
        scenario="lab",
    )


def generate_hanging_vine_scene(config: SceneConfig, seed: int) -> Scene:
    """Berries suspended along descending capsule chains."""
    _validate_common(config)
    if config.vine_count < 1:
        raise ConfigError("vine scene requires at least one vine")
    rng = np.random.default_rng(seed)
    base = np.asarray(config.robot_base, dtype=float)

    vines: list[Capsule] = []
    obstacles: list[FoliageObstacle] = []
    az_lo, az_hi = config.azimuth_band
    for k in range(config.vine_count):
        az = az_lo + (k + 0.5) * (az_hi - az_lo) / config.vine_count + rng.normal(0.0, 0.05)
        r = rng.uniform(config.radial_band[0] + 0.02, config.radial_band[1] - 0.02)
        top = np.array([base[0] + r * np.cos(az), base[1] + r * np.sin(az), config.vine_top])
        n_seg = int(rng.integers(3, 6))
        zs = np.linspace(config.vine_top, config.vine_bottom, n_seg + 1)
        pts = [top]
        for z in zs[1:]:
            drift = rng.normal(0.0, 0.02, 2)
            pts.append(np.array([pts[-1][0] + drift[0], pts[-1][1] + drift[1], z]))
        for a, b in zip(pts[:-1], pts[1:]):
            cap = Capsule(p0=a, p1=b, radius=config.stem_radius)
            vines.append(cap)
            obstacles.append(FoliageObstacle(shape=cap, tag="vine"))

    n_per = _periphery_count(config.berry_count, config.periphery_fraction)
    classes = [PlacementClass.PERIPHERY] * n_per + [PlacementClass.UNDER_CANOPY] * (
        config.berry_count - n_per
    )
    berries: list[Berry] = []
    for i, placement in enumerate(classes):
        for _attempt in range(400):
            cap = vines[int(rng.integers(0, len(vines)))]
            t = rng.uniform(0.15, 0.85)
            axis_point = cap.p0 + t * (cap.p1 - cap.p0)
            if not config.height_band[0] <= axis_point[2] <= config.height_band[1]:
                continue
            offset = rng.uniform(config.berry_radius + config.stem_radius + 0.001,
                                 config.vine_attach_radius)
            axis = cap.p1 - cap.p0
            center = axis_point + offset * _perpendicular_unit(axis / np.linalg.norm(axis), rng)
            radial = np.linalg.norm(center[:2] - base[:2])
            if not config.radial_band[0] <= radial <= config.radial_band[1]:
                continue
            if all(
                np.linalg.norm(center - b.center) >= config.min_berry_separation for b in berries
            ):
                berries.append(
                    Berry(id=i, center=center, radius=config.berry_radius, placement=placement)
                )
                break
        else:
            raise ConfigError("could not attach berries to vines with the configured bands")

    camera_hint = np.asarray(config.camera_hint, dtype=float)
    for berry in berries:
        if berry.placement is PlacementClass.UNDER_CANOPY:
            obstacles.extend(_shroud_leaves(config, rng, berry.center, camera_hint, berries))
    for cap in vines[:: max(1, len(vines) // (config.vine_count * config.vine_leaves_per_vine))]:
        for _attempt in range(40):
            t = rng.uniform(0.0, 1.0)
            axis = cap.p1 - cap.p0
            center = cap.p0 + t * axis + rng.uniform(0.015, 0.04) * _perpendicular_unit(
                axis / np.linalg.norm(axis), rng
            )
            disk = Disk(center=center, normal=rng.normal(0.0, 1.0, 3), radius=config.leaf_radius)
            if all(
                _point_disk_distance(b.center, disk) > config.obstacle_clearance for b in berries
            ):
                obstacles.append(FoliageObstacle(shape=disk, tag="leaf"))
                break

    return Scene(
        berries=tuple(berries),
        obstacles=tuple(obstacles),
        robot_base=base,
        corridor_width=None,
        seed=int(seed),
        scenario="hanging_vine",
    )


def generate_high_tunnel_scene(config: SceneConfig, seed: int) -> Scene:
    """Two crop rows bounding a corridor; the robot base sits centered.

    Berries populate the near (+x) row face. With outer_foliage_removed
    (the default, matching harvest-prepared rows) every leaf center lies
    at or behind the row face planes.
    """
    _validate_common(config)
    lo, hi = config.row_spacing_band
    if not (lo <= config.row_spacing <= hi) and not config.allow_spacing_override:
        raise ConfigError(
            f"row spacing {config.row_spacing} outside [{lo}, {hi}] (set allow_spacing_override)"
        )
    rng = np.random.default_rng(seed)
    base = np.asarray(config.robot_base, dtype=float)
    face = config.row_spacing / 2.0

    n_per = _periphery_count(config.berry_count, config.periphery_fraction)
    n_can = config.berry_count - n_per
    radial_hi = min(config.radial_band[1], face - 0.005)
    if radial_hi <= config.radial_band[0]:
        raise ConfigError("radial band incompatible with row spacing")
    canopy_lo = max(config.radial_band[0], radial_hi - 0.06)
    tunnel_cfg = replace(config, azimuth_band=(-0.35, 0.35))
    berries = _place_berries(
        tunnel_cfg,
        rng,
        n_per,
        n_can,
        periphery_radial=(config.radial_band[0], radial_hi),
        canopy_radial=(canopy_lo, radial_hi),
    )

    obstacles: list[FoliageObstacle] = []
    for berry in berries:
        if berry.placement is not PlacementClass.UNDER_CANOPY:
            continue
        # in-hull leaf curtain behind/near the berry
        count = int(rng.integers(config.shroud_leaves[0], config.shroud_leaves[1] + 1))
        for _ in range(count):
            for _attempt in range(60):
                center = np.array(
                    [
                        rng.uniform(face, face + 0.04),
                        berry.center[1] + rng.uniform(-0.06, 0.06),
                        berry.center[2] + rng.uniform(-0.06, 0.06),
                    ]
                )
                normal = np.array([-1.0, 0.0, 0.0]) + rng.normal(0.0, 0.2, 3)
                disk = Disk(center=center, normal=normal, radius=config.leaf_radius)
                if all(
                    _point_disk_distance(b.center, disk) > b.radius + 1e-3 for b in berries
                ):
                    obstacles.append(FoliageObstacle(shape=disk, tag="leaf"))
                    break
        if not config.outer_foliage_removed:
            camera_hint = np.asarray(config.camera_hint, dtype=float)
            obstacles.extend(_shroud_leaves(config, rng, berry.center, camera_hint, berries))

    # row bodies: vertical stems inside each hull
    for side in (1.0, -1.0):
        count = config.row_stems if side > 0 else max(2, config.row_stems // 2)
        for _ in range(count):
            x = side * rng.uniform(face + 0.01, face + 0.08)
            y = rng.uniform(-config.row_length / 2.0, config.row_length / 2.0)
            p0 = np.array([x, y, 0.02])
            p1 = np.array([x, y, config.height_band[1] + 0.12]) + rng.normal(0.0, 0.01, 3)
            cap = Capsule(p0=p0, p1=p1, radius=config.stem_radius)
            if all(
                _point_segment_distance(b.center, cap.p0, cap.p1) > b.radius + config.stem_radius
                for b in berries
            ):
                obstacles.append(FoliageObstacle(shape=cap, tag="stem"))
    # in-hull leaves along the near row
    for _ in range(config.ambient_leaves):
        for _attempt in range(60):
            center = np.array(
                [
                    rng.uniform(face, face + 0.08),
                    rng.uniform(-config.row_length / 2.0, config.row_length / 2.0),
                    rng.uniform(config.height_band[0], config.height_band[1]),
                ]
            )
            disk = Disk(
                center=center,
                normal=np.array([-1.0, 0.0, 0.0]) + rng.normal(0.0, 0.3, 3),
                radius=config.leaf_radius,
            )
            if all(_point_disk_distance(b.center, disk) > b.radius + 1e-3 for b in berries):
                obstacles.append(FoliageObstacle(shape=disk, tag="leaf"))
                break

    return Scene(
        berries=tuple(berries),
        obstacles=tuple(obstacles),
        robot_base=base,
        corridor_width=float(config.row_spacing),
        seed=int(seed),
        scenario="high_tunnel",
        metadata={"outer_foliage_removed": config.outer_foliage_removed, "row_face": face},
    )


_GENERATORS = {
    "lab": generate_lab_scene,
    "hanging_vine": generate_hanging_vine_scene,
    "high_tunnel": generate_high_tunnel_scene,
}


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    try:
        gen = _GENERATORS[config.kind]
    except KeyError:
        raise ConfigError(
            f"unknown scenario kind {config.kind!r}; valid kinds: {sorted(_GENERATORS)}"
        ) from None
    return gen(config, seed)


# ---------------------------------------------------------------------------
# serialization

SCENE_SCHEMA_VERSION = 1


def scene_to_dict(scene: Scene) -> dict:
    obstacles = []
    for obs in scene.obstacles:
        if isinstance(obs.shape, Disk):
            shape = {
                "kind": "disk",
                "center": obs.shape.center.tolist(),
                "normal": obs.shape.normal.tolist(),
                "radius": obs.shape.radius,
            }
        else:
            shape = {
                "kind": "capsule",
                "p0": obs.shape.p0.tolist(),
                "p1": obs.shape.p1.tolist(),
                "radius": obs.shape.radius,
            }
        obstacles.append({"tag": obs.tag, "shape": shape})
    return {
        "schema_version": SCENE_SCHEMA_VERSION,
        "scenario": scene.scenario,
        "seed": scene.seed,
        "frame": "right-handed, z up, meters",
        "robot_base": scene.robot_base.tolist(),
        "corridor_width": scene.corridor_width,
        "berries": [
            {
                "id": b.id,
                "center": b.center.tolist(),
                "radius": b.radius,
                "placement": b.placement.value,
            }
            for b in scene.berries
        ],
        "obstacles": obstacles,
        "metadata": scene.metadata,
    }


def scene_to_json(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), sort_keys=True, indent=2)


def scene_from_dict(data: dict) -> Scene:
    version = data.get("schema_version")
    if version != SCENE_SCHEMA_VERSION:
        raise ConfigError(f"unsupported scene schema version: {version!r}")
    berries = tuple(
        Berry(
            id=int(b["id"]),
            center=np.array(b["center"], dtype=float),
            radius=float(b["radius"]),
            placement=PlacementClass(b["placement"]),
        )
        for b in data["berries"]
    )
    obstacles = []
    for obs in data["obstacles"]:
        shape = obs["shape"]
        if shape["kind"] == "disk":
            geom: Disk | Capsule = Disk(
                center=np.array(shape["center"], dtype=float),
                normal=np.array(shape["normal"], dtype=float),
                radius=float(shape["radius"]),
            )
        elif shape["kind"] == "capsule":
            geom = Capsule(
                p0=np.array(shape["p0"], dtype=float),
                p1=np.array(shape["p1"], dtype=float),
                radius=float(shape["radius"]),
            )
        else:
            raise ConfigError(f"unknown shape kind {shape['kind']!r}")
        obstacles.append(FoliageObstacle(shape=geom, tag=obs["tag"]))
    return Scene(
        berries=berries,
        obstacles=tuple(obstacles),
        robot_base=np.array(data["robot_base"], dtype=float),
        corridor_width=data.get("corridor_width"),
        seed=int(data["seed"]),
        scenario=data["scenario"],
        metadata=data.get("metadata", {}),
    )


def scene_from_json(text: str) -> Scene:
    return scene_from_dict(json.loads(text))
