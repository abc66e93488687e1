"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written on a different route from the
production code: scipy rotations and matrix exponentials instead of the
hand-rolled quaternion/Rodrigues math, scalar per-primitive loops instead of
vectorized batch intersection, dense sampling instead of closed forms.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import expm
from scipy.spatial.transform import Rotation


# ---------------------------------------------------------------------------
# kinematics oracles


def link_matrix(link) -> np.ndarray:
    """4x4 transform of one link via scipy, independent of transforms.py."""
    t = np.eye(4)
    t[:3, 3] = np.asarray(link.offset, dtype=float)
    r = np.eye(4)
    r[:3, :3] = Rotation.from_euler(link.rotation_axis, link.rotation_angle).as_matrix()
    return t @ r


def matrix_chain_fk(model, q) -> np.ndarray:
    """FK as an explicit 4x4 matrix chain built with scipy rotations."""
    base = np.eye(4)
    base[:3, :3] = Rotation.from_quat(
        np.roll(np.asarray(model.base_pose.orientation, dtype=float), -1)
    ).as_matrix()
    base[:3, 3] = model.base_pose.position
    t = base
    for qi, link in zip(np.asarray(q, dtype=float), model.links):
        rz = np.eye(4)
        rz[:3, :3] = Rotation.from_euler("z", qi).as_matrix()
        t = t @ rz @ link_matrix(link)
    return t


def poe_fk(model, q) -> np.ndarray:
    """Product-of-exponentials FK: screw axes taken at the home configuration,
    exponentiated with scipy.linalg.expm."""
    prefix = np.eye(4)
    prefix[:3, :3] = Rotation.from_quat(
        np.roll(np.asarray(model.base_pose.orientation, dtype=float), -1)
    ).as_matrix()
    prefix[:3, 3] = model.base_pose.position
    screws = []
    for link in model.links:
        axis = prefix[:3, 2]
        origin = prefix[:3, 3]
        screws.append(np.concatenate([axis, -np.cross(axis, origin)]))
        prefix = prefix @ link_matrix(link)
    m_home = prefix
    t = np.eye(4)
    for screw, qi in zip(screws, np.asarray(q, dtype=float)):
        w, v = screw[:3], screw[3:]
        se3 = np.zeros((4, 4))
        se3[:3, :3] = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        se3[:3, 3] = v
        t = t @ expm(se3 * qi)
    return t @ m_home


def finite_difference_jacobian(model, q, fk_fn, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of FK: linear rows from position, angular
    rows from the relative rotation vector."""
    q = np.asarray(q, dtype=float)
    j = np.zeros((6, 6))
    for i in range(6):
        dq = np.zeros(6)
        dq[i] = step
        t_plus = fk_fn(model, q + dq)
        t_minus = fk_fn(model, q - dq)
        j[:3, i] = (t_plus[:3, 3] - t_minus[:3, 3]) / (2.0 * step)
        r_rel = t_plus[:3, :3] @ t_minus[:3, :3].T
        j[3:, i] = Rotation.from_matrix(r_rel).as_rotvec() / (2.0 * step)
    return j


# ---------------------------------------------------------------------------
# ray casting oracles (scalar math module route)


def ray_sphere(origin, direction, center, radius) -> float:
    """Smallest positive ray parameter hitting the sphere, or inf."""
    ox, oy, oz = (float(origin[k]) - float(center[k]) for k in range(3))
    dx, dy, dz = (float(direction[k]) for k in range(3))
    a = dx * dx + dy * dy + dz * dz
    b = 2.0 * (ox * dx + oy * dy + oz * dz)
    c = ox * ox + oy * oy + oz * oz - float(radius) ** 2
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return math.inf
    sq = math.sqrt(disc)
    best = math.inf
    for t in ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)):
        if t > 1e-9 and t < best:
            best = t
    return best


def ray_disk(origin, direction, center, normal, radius) -> float:
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    denom = float(np.dot(direction, n))
    if abs(denom) < 1e-12:
        return math.inf
    t = float(np.dot(np.asarray(center, dtype=float) - origin, n)) / denom
    if t <= 1e-9:
        return math.inf
    hit = np.asarray(origin, dtype=float) + t * np.asarray(direction, dtype=float)
    if np.linalg.norm(hit - center) <= radius:
        return t
    return math.inf


def ray_capsule(origin, direction, p0, p1, radius) -> float:
    """Capsule = cylinder body + two sphere caps, checked separately."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    best = min(ray_sphere(origin, direction, p0, radius), ray_sphere(origin, direction, p1, radius))
    if length < 1e-12:
        return best
    u = axis / length
    o = np.asarray(origin, dtype=float) - p0
    d = np.asarray(direction, dtype=float)
    d_perp = d - np.dot(d, u) * u
    o_perp = o - np.dot(o, u) * u
    a = float(np.dot(d_perp, d_perp))
    b = 2.0 * float(np.dot(d_perp, o_perp))
    c = float(np.dot(o_perp, o_perp)) - float(radius) ** 2
    if a > 1e-16:
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            sq = math.sqrt(disc)
            for t in ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)):
                if t > 1e-9:
                    s = np.dot(o + t * d, u)
                    if 0.0 <= s <= length and t < best:
                        best = t
    return best


def scene_nearest_hit(scene, origin, direction):
    """Scalar loop over every primitive; returns (kind, index, t) or None."""
    best = (None, None, math.inf)
    for i, berry in enumerate(scene.berries):
        t = ray_sphere(origin, direction, berry.center, berry.radius)
        if t < best[2]:
            best = ("berry", i, t)
    for i, obs in enumerate(scene.obstacles):
        shape = obs.shape
        if type(shape).__name__ == "Disk":
            t = ray_disk(origin, direction, shape.center, shape.normal, shape.radius)
        else:
            t = ray_capsule(origin, direction, shape.p0, shape.p1, shape.radius)
        if t < best[2]:
            best = ("obstacle", i, t)
    if best[0] is None:
        return None
    return best


# ---------------------------------------------------------------------------
# distance oracles for collision checking


def point_segment_distance(p, a, b) -> float:
    p = np.asarray(p, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ab = b - a
    denom = float(np.dot(ab, ab))
    s = 0.0 if denom < 1e-16 else float(np.clip(np.dot(p - a, ab) / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + s * ab)))


def point_disk_distance(p, center, normal, radius) -> float:
    p = np.asarray(p, dtype=float)
    center = np.asarray(center, dtype=float)
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    dz = float(np.dot(p - center, n))
    in_plane = (p - center) - dz * n
    rho = float(np.linalg.norm(in_plane))
    if rho <= radius:
        return abs(dz)
    return math.hypot(dz, rho - radius)


def _scan_points(a0, a1, samples):
    ts = np.linspace(0.0, 1.0, samples)
    a0 = np.asarray(a0, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    return ts, a0[None, :] + ts[:, None] * (a1 - a0)[None, :]


def segment_segment_distance(a0, a1, b0, b1, samples: int = 2001) -> float:
    """Dense-sampling route: min over sampled points of exact point-segment
    distances (evaluated as one array op), golden-section refined inside the
    winning bracket (the distance is convex in the path parameter)."""
    ts, pts = _scan_points(a0, a1, samples)
    b0 = np.asarray(b0, dtype=float)
    b1 = np.asarray(b1, dtype=float)
    ab = b1 - b0
    denom = float(ab @ ab)
    if denom < 1e-16:
        dists = np.linalg.norm(pts - b0, axis=1)
    else:
        s = np.clip((pts - b0) @ ab / denom, 0.0, 1.0)
        dists = np.linalg.norm(pts - (b0 + s[:, None] * ab), axis=1)
    k = int(np.argmin(dists))
    a0 = np.asarray(a0, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    t_lo, t_hi = ts[max(0, k - 1)], ts[min(samples - 1, k + 1)]
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    for _ in range(60):
        m1 = t_hi - phi * (t_hi - t_lo)
        m2 = t_lo + phi * (t_hi - t_lo)
        d1 = point_segment_distance(a0 + m1 * (a1 - a0), b0, b1)
        d2 = point_segment_distance(a0 + m2 * (a1 - a0), b0, b1)
        if d1 < d2:
            t_hi = m2
        else:
            t_lo = m1
    t = (t_lo + t_hi) / 2.0
    return point_segment_distance(a0 + t * (a1 - a0), b0, b1)


def segment_disk_distance(a0, a1, center, normal, radius) -> float:
    ts, pts = _scan_points(a0, a1, 2001)
    center = np.asarray(center, dtype=float)
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    rel = pts - center
    dz = rel @ normal
    rho = np.linalg.norm(rel - dz[:, None] * normal[None, :], axis=1)
    dists = np.hypot(dz, np.maximum(rho - radius, 0.0))
    k = int(np.argmin(dists))
    a0 = np.asarray(a0, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    t_lo, t_hi = ts[max(0, k - 1)], ts[min(2000, k + 1)]
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    for _ in range(60):
        m1 = t_hi - phi * (t_hi - t_lo)
        m2 = t_lo + phi * (t_hi - t_lo)
        d1 = point_disk_distance(a0 + m1 * (a1 - a0), center, normal, radius)
        d2 = point_disk_distance(a0 + m2 * (a1 - a0), center, normal, radius)
        if d1 < d2:
            t_hi = m2
        else:
            t_lo = m1
    t = (t_lo + t_hi) / 2.0
    return point_disk_distance(a0 + t * (a1 - a0), center, normal, radius)


# ---------------------------------------------------------------------------
# sensing oracles


def matrix_project(view, point):
    """Pinhole projection via an explicit homogeneous 3x4 matrix K [R^T | -R^T p],
    independent of the package's per-component arithmetic. Returns (u, v) or
    None for non-positive depth."""
    intr = view.intrinsics
    k = np.array([[intr.fx, 0.0, intr.cx], [0.0, intr.fy, intr.cy], [0.0, 0.0, 1.0]])
    r = view.pose.rotation_matrix()
    extrinsic = np.hstack([r.T, (-r.T @ view.pose.position)[:, None]])
    homog = k @ extrinsic @ np.append(np.asarray(point, dtype=float), 1.0)
    if homog[2] <= 0.0:
        return None
    return homog[0] / homog[2], homog[1] / homog[2]


def dense_sphere_projection_bbox(view, center, radius, n: int = 60000):
    """Project a dense Fibonacci covering of the sphere surface and take the
    pixel-space bounding box. Converges to the true silhouette bbox from the
    inside."""
    k = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * k / n)
    theta = np.pi * (1.0 + math.sqrt(5.0)) * k
    pts = np.column_stack(
        [
            np.sin(phi) * np.cos(theta),
            np.sin(phi) * np.sin(theta),
            np.cos(phi),
        ]
    ) * radius + np.asarray(center, dtype=float)
    r = view.pose.rotation_matrix()
    cam = (pts - view.pose.position) @ r
    cam = cam[cam[:, 2] > 1e-9]
    u = view.intrinsics.fx * cam[:, 0] / cam[:, 2] + view.intrinsics.cx
    v = view.intrinsics.fy * cam[:, 1] / cam[:, 2] + view.intrinsics.cy
    return float(u.min()), float(v.min()), float(u.max()), float(v.max())


def barycentric_interpolate(points, values, query):
    """Scan every simplex of a scipy Delaunay triangulation and solve the
    barycentric system directly (no LinearNDInterpolator)."""
    from scipy.spatial import Delaunay

    tri = Delaunay(points)
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    q = np.asarray(query, dtype=float)
    for simplex in tri.simplices:
        verts = points[simplex]
        mat = (verts[1:] - verts[0]).T  # columns are edge vectors
        try:
            lam_rest = np.linalg.solve(mat, q - verts[0])
        except np.linalg.LinAlgError:
            continue
        lam = np.concatenate([[1.0 - lam_rest.sum()], lam_rest])
        if np.all(lam >= -1e-9):
            return float(np.dot(lam, values[simplex]))
    return None


# ---------------------------------------------------------------------------
# collision oracles


def oracle_collision_segments(model, q):
    """Arm capsules (p0, p1, radius) recomputed from explicit matrix-chain
    partial products, independent of kinematics.fk_chain."""
    base = np.eye(4)
    base[:3, :3] = Rotation.from_quat(
        np.roll(np.asarray(model.base_pose.orientation, dtype=float), -1)
    ).as_matrix()
    base[:3, 3] = model.base_pose.position
    t = base
    joint_origins = []
    for qi, link in zip(np.asarray(q, dtype=float), model.links):
        joint_origins.append(t[:3, 3].copy())
        rz = np.eye(4)
        rz[:3, :3] = Rotation.from_euler("z", qi).as_matrix()
        t = t @ rz @ link_matrix(link)
    tool = t[:3, 3]
    tip = tool + model.gripper_length * t[:3, 2]
    anchors = [
        (joint_origins[0], joint_origins[1]),
        (joint_origins[1], joint_origins[2]),
        (joint_origins[2], joint_origins[3]),
        (joint_origins[3], tool),
        (tool, tip),
    ]
    return [(a, b, float(r)) for (a, b), r in zip(anchors, model.capsule_radii)]


def oracle_contact_set(model, scene, q, margin, exclusion_radius, self_pairs):
    """Brute-force contact set {(kind, index, link)} using the sampled-scan
    distance oracles above."""
    segments = oracle_collision_segments(model, q)
    tool = segments[4][0]
    contacts = set()
    for link, (a, b, link_r) in enumerate(segments):
        for i, berry in enumerate(scene.berries):
            if np.linalg.norm(np.asarray(berry.center) - tool) <= exclusion_radius:
                continue
            d = point_segment_distance(berry.center, a, b) - link_r - berry.radius
            if d < margin:
                contacts.add(("berry", i, link))
        for i, obs in enumerate(scene.obstacles):
            shape = obs.shape
            if type(shape).__name__ == "Disk":
                d = segment_disk_distance(a, b, shape.center, shape.normal, shape.radius) - link_r
            else:
                d = (
                    segment_segment_distance(a, b, shape.p0, shape.p1)
                    - link_r
                    - shape.radius
                )
            if d < margin:
                contacts.add(("obstacle", i, link))
    for i, j in self_pairs:
        a0, a1, r0 = segments[i]
        b0, b1, r1 = segments[j]
        if segment_segment_distance(a0, a1, b0, b1) - r0 - r1 < margin:
            contacts.add(("self", j, i))
    return contacts


# ---------------------------------------------------------------------------
# control oracles


def pid_clamp_steps(limit: float, error: float, dt: float) -> int:
    """Closed-form tick count until the integral accumulator saturates."""
    return math.ceil(limit / (abs(error) * dt))
