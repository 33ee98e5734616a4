"""Deterministic synthetic scenes: multi-session traversals, LIDAR-like point
samples, rendered intensity/depth frames, and ground-truth labels.

World frame matches the session-0 camera at t=0: x right, y down, z forward.
The ground plane sits at y = +CAMERA_HEIGHT. Everything is reproducible from
the scene seed; rendering is a pure function of (seed, session, t).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .errors import ConfigError
from .geometry import CameraModel, Pose

CAMERA_HEIGHT = 1.5

_HIT_EPS = 1e-9

_LATTICE_OFFSET = 1 << 22  # keeps hashed lattice coordinates positive

_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xC2B2AE3D27D4EB4F)
_MIX3 = np.uint64(0xFF51AFD7ED558CCD)
_MIX4 = np.uint64(0xC4CEB9FE1A85EC53)


def _hash01(ix, iy, seed):
    """Hash integer lattice coordinates to floats in [0, 1)."""
    h = (np.asarray(ix, dtype=np.int64) + _LATTICE_OFFSET).astype(np.uint64) * _MIX1
    h ^= (np.asarray(iy, dtype=np.int64) + _LATTICE_OFFSET).astype(np.uint64) * _MIX2
    h ^= np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    h ^= h >> np.uint64(33)
    h *= _MIX3
    h ^= h >> np.uint64(33)
    h *= _MIX4
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def value_noise(x, y, seed, octaves=3):
    """Octaved bilinear value noise over a unit lattice, output in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros_like(x)
    total = 0.0
    amp = 1.0
    freq = 1.0
    for octave in range(octaves):
        xs, ys = x * freq, y * freq
        ix, iy = np.floor(xs), np.floor(ys)
        fx, fy = _smoothstep(xs - ix), _smoothstep(ys - iy)
        s = seed + 0x51ED * octave
        v00 = _hash01(ix, iy, s)
        v10 = _hash01(ix + 1, iy, s)
        v01 = _hash01(ix, iy + 1, s)
        v11 = _hash01(ix + 1, iy + 1, s)
        v = (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy
        out += amp * v
        total += amp
        amp *= 0.5
        freq *= 2.0
    return out / total


@njit(cache=True)
def _albedo_kernel(us, vs, seed, scale, out):
    mix1 = np.uint64(0x9E3779B97F4A7C15)
    mix2 = np.uint64(0xC2B2AE3D27D4EB4F)
    mix3 = np.uint64(0xFF51AFD7ED558CCD)
    mix4 = np.uint64(0xC4CEB9FE1A85EC53)
    offset = np.int64(1 << 22)
    inv53 = 1.0 / float(1 << 53)

    def lattice(ix, iy, s):
        h = np.uint64(ix + offset) * mix1
        h ^= np.uint64(iy + offset) * mix2
        h ^= np.uint64(s)
        h ^= h >> np.uint64(33)
        h *= mix3
        h ^= h >> np.uint64(33)
        h *= mix4
        h ^= h >> np.uint64(33)
        return (h >> np.uint64(11)) * inv53

    for i in range(len(us)):
        x = us[i] / scale
        y = vs[i] / scale
        acc = 0.0
        total = 0.0
        amp = 1.0
        freq = 1.0
        for octave in range(3):
            xs = x * freq
            ys = y * freq
            ix = np.int64(np.floor(xs))
            iy = np.int64(np.floor(ys))
            fx = xs - ix
            fy = ys - iy
            fx = fx * fx * (3.0 - 2.0 * fx)
            fy = fy * fy * (3.0 - 2.0 * fy)
            s = seed + 0x51ED * octave
            v00 = lattice(ix, iy, s)
            v10 = lattice(ix + 1, iy, s)
            v01 = lattice(ix, iy + 1, s)
            v11 = lattice(ix + 1, iy + 1, s)
            val = (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy
            acc += amp * val
            total += amp
            amp *= 0.5
            freq *= 2.0
        smooth = acc / total
        blocky = lattice(np.int64(np.floor(x)), np.int64(np.floor(y)), seed + 0xB10C)
        out[i] = 0.15 + 0.7 * (0.55 * smooth + 0.45 * blocky)


def _texture_reference(u, v, seed, scale):
    """Pure-numpy albedo, kept as the oracle for the compiled kernel."""
    su, sv = u / scale, v / scale
    smooth = value_noise(su, sv, seed)
    blocky = _hash01(np.floor(su), np.floor(sv), seed + 0xB10C)
    return 0.15 + 0.7 * (0.55 * smooth + 0.45 * blocky)


def _texture(u, v, seed, scale):
    """Surface albedo: smooth noise plus a blocky lattice for corner content."""
    out = np.empty(len(u))
    _albedo_kernel(np.ascontiguousarray(u), np.ascontiguousarray(v), seed, scale, out)
    return out


@dataclass(frozen=True)
class Primitive:
    """A textured box ("box", full extents size[:3]) or finite rectangle
    ("rect", extents size[:2] in its local z=0 plane)."""

    kind: str
    pose: Pose
    size: tuple
    texture_seed: int
    texture_scale: float = 0.4

    def pose_at(self, t: float) -> Pose:
        return self.pose


def box(center, size, texture_seed, rotation=None, texture_scale=0.4) -> Primitive:
    rot = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
    return Primitive("box", Pose(rot, np.asarray(center, dtype=float)), tuple(size), texture_seed, texture_scale)


def ground_plane(y, extent_x, extent_z, texture_seed, center_z=0.0, texture_scale=0.6) -> Primitive:
    # local z axis points up (world -y) so the rect faces the camera
    rot = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    return Primitive(
        "rect",
        Pose(rot, np.array([0.0, y, center_z])),
        (extent_x, extent_z),
        texture_seed,
        texture_scale,
    )


@dataclass(frozen=True)
class Mover:
    """A primitive with linear world motion, present only in some sessions."""

    primitive: Primitive
    velocity: np.ndarray
    present_in: tuple

    def active(self, session: int) -> bool:
        return session in self.present_in

    def primitive_at(self, t: float) -> Primitive:
        pose = self.primitive.pose
        moved = Pose(pose.rotation, pose.translation + np.asarray(self.velocity) * t)
        return replace(self.primitive, pose=moved)


class LinePath:
    """Straight-line camera path with a fixed orientation."""

    def __init__(self, start, velocity, rotation=None, duration=10.0):
        self.start = np.asarray(start, dtype=float)
        self.vel = np.asarray(velocity, dtype=float)
        self.rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        self.duration = float(duration)

    def pose(self, t: float) -> Pose:
        return Pose(self.rotation, self.start + self.vel * t)

    def velocity(self, t: float) -> np.ndarray:
        return self.vel.copy()


class ArcPath:
    """Constant-speed left turn at a fixed angular rate, starting at the
    origin heading +z. Heading angle theta = turn_rate * t."""

    def __init__(self, speed, turn_rate, duration):
        self.speed = float(speed)
        self.turn_rate = float(turn_rate)
        self.duration = float(duration)

    def _heading(self, theta):
        return np.array([-np.sin(theta), 0.0, np.cos(theta)])

    def pose(self, t: float) -> Pose:
        theta = self.turn_rate * t
        radius = self.speed / self.turn_rate
        position = np.array([radius * (np.cos(theta) - 1.0), 0.0, radius * np.sin(theta)])
        z_axis = self._heading(theta)
        y_axis = np.array([0.0, 1.0, 0.0])
        x_axis = np.cross(y_axis, z_axis)
        rotation = np.stack([x_axis, y_axis, z_axis], axis=1)
        return Pose(rotation, position)

    def velocity(self, t: float) -> np.ndarray:
        return self.speed * self._heading(self.turn_rate * t)


@dataclass
class SceneSpec:
    """Everything needed to render any frame of any session deterministically."""

    camera: CameraModel
    static_primitives: tuple
    movers: tuple
    sessions: int
    base_path: object
    session_offsets: np.ndarray
    seed: int
    duration: float
    frame_rate: float = 10.0
    background: float = 0.5
    light: np.ndarray = field(default_factory=lambda: np.array([0.4, -0.8, 0.45]))

    def __post_init__(self):
        self.light = np.asarray(self.light, dtype=float)
        self.light = self.light / np.linalg.norm(self.light)
        self.session_offsets = np.asarray(self.session_offsets, dtype=float).reshape(self.sessions, 3)

    def camera_pose(self, session: int, t: float) -> Pose:
        base = self.base_path.pose(t)
        return Pose(base.rotation, base.translation + self.session_offsets[session])

    def camera_velocity(self, t: float) -> np.ndarray:
        return self.base_path.velocity(t)

    def active_primitives(self, session: int, t: float) -> list:
        prims = list(self.static_primitives)
        mover_flags = [False] * len(prims)
        for mover in self.movers:
            if mover.active(session):
                prims.append(mover.primitive_at(t))
                mover_flags.append(True)
        return prims, mover_flags

    def frame_count(self) -> int:
        return int(np.floor(self.duration * self.frame_rate)) + 1

    def frame_time(self, index: int) -> float:
        return index / self.frame_rate

    def timestamp_ns(self, index: int) -> int:
        return int(round(index / self.frame_rate * 1e9))


@dataclass
class SimFrame:
    intensity: np.ndarray
    depth: np.ndarray
    mover_mask: np.ndarray
    normals_cam: np.ndarray
    camera_pose: Pose
    velocity: np.ndarray
    timestamp_ns: int


def _intersect(prim: Primitive, origin: np.ndarray, dirs: np.ndarray):
    """Rays from one origin against a primitive; t is in units of |dir|."""
    inv = prim.pose.inverse()
    o = inv.rotation @ np.asarray(origin, dtype=float) + inv.translation
    d = dirs @ inv.rotation.T
    if prim.kind == "box":
        half = np.asarray(prim.size, dtype=float) / 2.0
        tmin = np.full(len(dirs), -np.inf)
        tmax = np.full(len(dirs), np.inf)
        for axis in range(3):
            da = d[:, axis]
            da = np.where(np.abs(da) < 1e-300, np.copysign(1e-300, da + 0.0), da)
            inv_da = 1.0 / da
            t1 = (-half[axis] - o[axis]) * inv_da
            t2 = (half[axis] - o[axis]) * inv_da
            np.maximum(tmin, np.minimum(t1, t2), out=tmin)
            np.minimum(tmax, np.maximum(t1, t2), out=tmax)
        hit = (tmax >= tmin) & (tmin > _HIT_EPS)
        return np.where(hit, tmin, np.inf), hit
    if prim.kind == "rect":
        sx, sy = prim.size[0] / 2.0, prim.size[1] / 2.0
        dz = d[:, 2]
        dz = np.where(np.abs(dz) < 1e-300, np.copysign(1e-300, dz + 0.0), dz)
        t = -o[2] / dz
        px = o[0] + t * d[:, 0]
        py = o[1] + t * d[:, 1]
        hit = (t > _HIT_EPS) & (np.abs(px) <= sx) & (np.abs(py) <= sy)
        return np.where(hit, t, np.inf), hit
    raise ConfigError(f"unknown primitive kind {prim.kind!r}")


def _surface_attributes(prim: Primitive, points_world: np.ndarray, view_dirs: np.ndarray):
    """Albedo and outward normals (oriented against the view direction)."""
    inv = prim.pose.inverse()
    local = points_world @ inv.rotation.T + inv.translation
    if prim.kind == "box":
        half = np.maximum(np.asarray(prim.size, dtype=float) / 2.0, 1e-12)
        rel = np.abs(local) / half
        face_axis = np.argmax(rel, axis=1)
        n_local = np.zeros_like(local)
        rows = np.arange(len(local))
        n_local[rows, face_axis] = np.sign(local[rows, face_axis])
        uv_axes = np.array([[1, 2], [0, 2], [0, 1]])
        tex_u = local[rows, uv_axes[face_axis, 0]]
        tex_v = local[rows, uv_axes[face_axis, 1]]
        # distinct texture per face so adjoining faces do not blend
        tex_seed_off = face_axis + 3 * (n_local[rows, face_axis] > 0)
    else:
        n_local = np.zeros_like(local)
        n_local[:, 2] = 1.0
        tex_u, tex_v = local[:, 0], local[:, 1]
        tex_seed_off = np.zeros(len(local), dtype=np.int64)
    n_world = n_local @ prim.pose.rotation.T
    flip = np.sum(n_world * view_dirs, axis=1) > 0
    n_world[flip] = -n_world[flip]
    albedo = np.empty(len(local))
    for off in np.unique(tex_seed_off):
        m = tex_seed_off == off
        albedo[m] = _texture(tex_u[m], tex_v[m], prim.texture_seed + 17 * int(off), prim.texture_scale)
    return albedo, n_world


def cast_rays(scene: SceneSpec, session: int, t: float, origin: np.ndarray, dirs: np.ndarray):
    """Shared ray-caster from a single origin. Returns (t_hit, prim_index,
    prims, is_mover); t_hit is inf on miss, in units of the (possibly
    unnormalized) dirs."""
    prims, mover_flags = scene.active_primitives(session, t)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_prim = np.full(n, -1, dtype=np.int64)
    for i, prim in enumerate(prims):
        t_hit, hit = _intersect(prim, origin, dirs)
        closer = t_hit < best_t
        best_t = np.where(closer, t_hit, best_t)
        best_prim = np.where(closer, i, best_prim)
    is_mover = np.zeros(n, dtype=bool)
    for i, flag in enumerate(mover_flags):
        if flag:
            is_mover |= best_prim == i
    return best_t, best_prim, prims, is_mover


def _prim_corners(prim: Primitive) -> np.ndarray:
    if prim.kind == "box":
        half = np.asarray(prim.size, dtype=float) / 2.0
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float
        )
        local = signs * half
    else:
        sx, sy = prim.size[0] / 2.0, prim.size[1] / 2.0
        local = np.array([[-sx, -sy, 0.0], [sx, -sy, 0.0], [-sx, sy, 0.0], [sx, sy, 0.0]])
    return local @ prim.pose.rotation.T + prim.pose.translation


def _screen_bbox(prim: Primitive, pose: Pose, cam: CameraModel):
    """Conservative pixel bbox of a convex primitive, or None when it may
    cover anything (a corner near/behind the camera)."""
    corners_cam = (_prim_corners(prim) - pose.translation) @ pose.rotation
    if np.any(corners_cam[:, 2] < 0.05):
        return None
    u = cam.fx * corners_cam[:, 0] / corners_cam[:, 2] + cam.cx
    v = cam.fy * corners_cam[:, 1] / corners_cam[:, 2] + cam.cy
    u0 = max(int(np.floor(u.min())) - 1, 0)
    u1 = min(int(np.ceil(u.max())) + 1, cam.width - 1)
    v0 = max(int(np.floor(v.min())) - 1, 0)
    v1 = min(int(np.ceil(v.max())) + 1, cam.height - 1)
    if u0 > u1 or v0 > v1:
        return (0, -1, 0, -1)  # fully off screen
    return (v0, v1, u0, u1)


def render_frame(scene: SceneSpec, session: int, t: float) -> SimFrame:
    cam = scene.camera
    pose = scene.camera_pose(session, t)
    h, w = cam.height, cam.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack(
        [(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us)], axis=-1
    )
    dirs_world = (dirs_cam.reshape(-1, 3) @ pose.rotation.T).reshape(h, w, 3)
    origin = pose.translation

    prims, mover_flags = scene.active_primitives(session, t)
    depth_img = np.full((h, w), np.inf)
    prim_img = np.full((h, w), -1, dtype=np.int64)
    for i, prim in enumerate(prims):
        bbox = _screen_bbox(prim, pose, cam)
        if bbox is None:
            v0, v1, u0, u1 = 0, h - 1, 0, w - 1
        else:
            v0, v1, u0, u1 = bbox
        if v0 > v1 or u0 > u1:
            continue
        sub_dirs = dirs_world[v0 : v1 + 1, u0 : u1 + 1].reshape(-1, 3)
        t_hit, _ = _intersect(prim, origin, sub_dirs)
        t_hit = t_hit.reshape(v1 - v0 + 1, u1 - u0 + 1)
        region_depth = depth_img[v0 : v1 + 1, u0 : u1 + 1]
        closer = t_hit < region_depth
        region_depth[closer] = t_hit[closer]
        prim_img[v0 : v1 + 1, u0 : u1 + 1][closer] = i

    depth = depth_img.reshape(-1)
    prim_idx = prim_img.reshape(-1)
    is_mover = np.zeros(h * w, dtype=bool)
    for i, flag in enumerate(mover_flags):
        if flag:
            is_mover |= prim_idx == i
    dirs_world = dirs_world.reshape(-1, 3)

    hit = np.isfinite(depth)
    intensity = np.full(h * w, scene.background)
    normals = np.full((h * w, 3), np.nan)
    if np.any(hit):
        pts = origin + depth[hit, None] * dirs_world[hit]
        view = dirs_world[hit]
        for i in np.unique(prim_idx[hit]):
            m_local = prim_idx[hit] == i
            albedo, n_world = _surface_attributes(prims[i], pts[m_local], view[m_local])
            shade = 0.35 + 0.65 * np.abs(n_world @ scene.light)
            full_idx = np.flatnonzero(hit)[m_local]
            intensity[full_idx] = np.clip(albedo * shade, 0.0, 1.0)
            normals[full_idx] = n_world @ pose.rotation  # world -> camera frame
    depth_img = np.where(hit, depth, np.nan).reshape(h, w)
    return SimFrame(
        intensity=intensity.reshape(h, w),
        depth=depth_img,
        mover_mask=is_mover.reshape(h, w),
        normals_cam=normals.reshape(h, w, 3),
        camera_pose=pose,
        velocity=scene.camera_velocity(t),
        timestamp_ns=int(round(t * 1e9)),
    )


def _radical_inverse(indices: np.ndarray, base: int) -> np.ndarray:
    idx = indices.astype(np.int64).copy()
    out = np.zeros(len(idx), dtype=np.float64)
    inv_base = 1.0 / base
    scale = inv_base
    while np.any(idx > 0):
        out += (idx % base) * scale
        idx //= base
        scale *= inv_base
    return out


@dataclass
class LidarScan:
    points: np.ndarray
    session: int
    is_mover: np.ndarray


def sample_lidar(scene: SceneSpec, session: int, t: float, rays_per_scan: int, scan_index: int = 0) -> LidarScan:
    """Quasi-random world-frame surface samples from the camera position.

    Ray directions come from a Halton fan (full azimuth, limited elevation);
    the Halton index window is derived from (seed, session, scan_index) so
    every scan is distinct yet reproducible.
    """
    if rays_per_scan < 1:
        raise ConfigError("rays_per_scan must be >= 1")
    pose = scene.camera_pose(session, t)
    base_idx = 1 + (scan_index * 131071 + session * 524287 + (scene.seed % 65521) * 8191) % (1 << 22)
    idx = np.arange(base_idx, base_idx + rays_per_scan)
    azimuth = (_radical_inverse(idx, 2) * 2.0 - 1.0) * np.pi
    elevation = (_radical_inverse(idx, 3) * 2.0 - 1.0) * 0.35
    ce = np.cos(elevation)
    dirs = np.stack([ce * np.sin(azimuth), -np.sin(elevation), ce * np.cos(azimuth)], axis=1)
    t_hit, _, _, is_mover = cast_rays(scene, session, t, pose.translation, dirs)
    hit = np.isfinite(t_hit)
    points = pose.translation + t_hit[hit, None] * dirs[hit]
    return LidarScan(points=points, session=session, is_mover=is_mover[hit])


def gather_cloud(scene: SceneSpec, scans_per_session: int, rays_per_scan: int):
    """Aggregate LIDAR over all sessions along each session's camera path.

    Returns (positions (N,3), sessions (N,), is_mover (N,)) in scan order.
    """
    all_points, all_sessions, all_mover = [], [], []
    times = np.linspace(0.0, scene.duration, scans_per_session)
    for session in range(scene.sessions):
        for k, t in enumerate(times):
            scan = sample_lidar(scene, session, t, rays_per_scan, scan_index=k)
            all_points.append(scan.points)
            all_sessions.append(np.full(len(scan.points), session, dtype=np.uint32))
            all_mover.append(scan.is_mover)
    return (
        np.concatenate(all_points, axis=0),
        np.concatenate(all_sessions, axis=0),
        np.concatenate(all_mover, axis=0),
    )


def _default_camera() -> CameraModel:
    return CameraModel(fx=300.0, fy=300.0, cx=319.5, cy=127.5, baseline=0.5, width=640, height=256)


def _street_primitives(rng, length, spacing=8.0, offset=6.5):
    """Boxes lining both sides of a straight road plus the ground plane."""
    prims = [ground_plane(CAMERA_HEIGHT, 60.0, 2 * length + 40.0, int(rng.integers(1 << 31)), center_z=length / 2)]
    z = 0.0
    side = 1.0
    while z < length + 10.0:
        sx = 3.0 + 2.0 * rng.random()
        sy = 4.0 + 3.0 * rng.random()
        sz = 4.0 + 2.0 * rng.random()
        x = side * (offset + rng.random())
        prims.append(
            box(
                (x, CAMERA_HEIGHT - sy / 2.0, z + sz / 2.0),
                (sx, sy, sz),
                int(rng.integers(1 << 31)),
            )
        )
        side = -side
        z += spacing / 2.0
    return prims


def scenario_multi_session(seed: int = 0, sessions: int = 8, length: float = 50.0) -> SceneSpec:
    """Straight road surveyed `sessions` times with lateral jitter; a few
    parked or slow movers appear in at most two sessions each.

    `length` scales the surveyed street; point budgets should scale with it
    to keep a physically constant surface density.
    """
    if sessions < 2:
        raise ConfigError("multi_session needs at least 2 sessions")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E55]))
    prims = _street_primitives(rng, length)
    # parked/slow vehicles keep a realistic ground clearance, which also
    # limits neighbourhood mixing between their lowest points and the road
    clearance = 0.4
    movers = (
        Mover(
            box((-3.0, CAMERA_HEIGHT - clearance - 1.3, 18.0), (2.2, 2.6, 5.5), int(rng.integers(1 << 31))),
            np.zeros(3),
            (min(2, sessions - 1),),
        ),
        Mover(
            box((3.2, CAMERA_HEIGHT - clearance - 1.0, 33.0), (1.9, 2.0, 4.6), int(rng.integers(1 << 31))),
            np.zeros(3),
            (min(4, sessions - 1), min(5, sessions - 1)),
        ),
        Mover(
            box((0.8, CAMERA_HEIGHT - clearance - 1.2, 44.0), (2.0, 2.4, 5.0), int(rng.integers(1 << 31))),
            np.array([0.0, 0.0, 1.5]),
            (0,),
        ),
    )
    speed = 5.0
    duration = length / speed
    offsets = np.zeros((sessions, 3))
    offsets[:, 0] = rng.normal(0.0, 0.2, sessions)
    return SceneSpec(
        camera=_default_camera(),
        static_primitives=tuple(prims),
        movers=movers,
        sessions=sessions,
        base_path=LinePath((0.0, 0.0, 0.0), (0.0, 0.0, speed), duration=duration),
        session_offsets=offsets,
        seed=seed,
        duration=duration,
    )


def scenario_straight_line(seed: int = 0, speed: float = 10.0, duration: float = 15.0) -> SceneSpec:
    """Mover-free straight run used as the nominal-case control."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57A1]))
    prims = _street_primitives(rng, speed * duration, spacing=10.0)
    return SceneSpec(
        camera=_default_camera(),
        static_primitives=tuple(prims),
        movers=(),
        sessions=1,
        base_path=LinePath((0.0, 0.0, 0.0), (0.0, 0.0, speed), duration=duration),
        session_offsets=np.zeros((1, 3)),
        seed=seed,
        duration=duration,
    )


def scenario_bus_pass(occlusion_fraction: float, seed: int = 0, duration: float = 30.0) -> SceneSpec:
    """Left-turning camera with a large box crossing the view, sized so its
    rendered mask covers the requested fraction of pixels at closest approach."""
    if not 0.0 < occlusion_fraction < 1.0:
        raise ConfigError("occlusion_fraction must be in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB05]))
    cam = _default_camera()
    speed = 1.8
    turn_rate = 0.05
    path = ArcPath(speed=speed, turn_rate=turn_rate, duration=duration)

    # Buildings line both sides of the curved road, offset laterally from the
    # path so the camera never drives into one and they stay behind the bus.
    prims = [ground_plane(CAMERA_HEIGHT, 160.0, 160.0, int(rng.integers(1 << 31)), center_z=20.0)]
    radius = speed / turn_rate
    for angle in np.linspace(-0.3, 2.2, 22):
        path_point = np.array([radius * (np.cos(angle) - 1.0), 0.0, radius * np.sin(angle)])
        lateral_dir = np.array([np.cos(angle), 0.0, np.sin(angle)])
        side = 1.0 if int(rng.integers(2)) else -1.0
        offset = side * (7.0 + 4.0 * rng.random())
        center = path_point + lateral_dir * offset
        sy = 5.0 + 3.0 * rng.random()
        yaw = angle + rng.normal(0.0, 0.25)
        rot = np.array(
            [[np.cos(yaw), 0.0, np.sin(yaw)], [0.0, 1.0, 0.0], [-np.sin(yaw), 0.0, np.cos(yaw)]]
        )
        prims.append(
            box(
                (center[0], CAMERA_HEIGHT - sy / 2.0, center[2]),
                (3.0 + 2.5 * rng.random(), sy, 3.0 + 2.0 * rng.random()),
                int(rng.integers(1 << 31)),
                rotation=rot,
                texture_scale=0.28,  # fine texture keeps corners in thin strips
            )
        )

    # The bus is sized from its front-face depth so that at closest approach
    # it fills `occlusion_fraction` of the image width and the full height.
    # It must sit nearer than the ground-visibility limit fy*h/(H-1-cy), else
    # road pixels in front of it would cap the achievable coverage.
    t_peak = duration / 2.0
    z_face = 3.2
    bus_depth = 0.6
    z_center = z_face + bus_depth / 2.0
    if z_face <= 0.5:
        raise ConfigError("bus would intersect the camera")
    peak_pose = path.pose(t_peak)
    axis = peak_pose.rotation[:, 2]
    lateral = peak_pose.rotation[:, 0]
    bus_width = occlusion_fraction * cam.width * z_face / cam.fx
    bus_height = cam.height * z_face / cam.fy + 1.0
    bus_speed = 6.0
    center_at_peak = peak_pose.translation + axis * z_center
    center_at_peak = center_at_peak.copy()
    center_at_peak[1] = CAMERA_HEIGHT - bus_height / 2.0  # resting on the ground
    down = np.array([0.0, 1.0, 0.0])
    rot = np.stack([lateral, down, np.cross(lateral, down)], axis=1)
    start_center = center_at_peak - lateral * bus_speed * t_peak
    bus = Mover(
        Primitive(
            "box",
            Pose(rot, start_center),
            (bus_width, bus_height, bus_depth),
            int(rng.integers(1 << 31)),
            texture_scale=0.5,
        ),
        velocity=lateral * bus_speed,
        present_in=(0,),
    )
    return SceneSpec(
        camera=cam,
        static_primitives=tuple(prims),
        movers=(bus,),
        sessions=1,
        base_path=path,
        session_offsets=np.zeros((1, 3)),
        seed=seed,
        duration=duration,
    )
