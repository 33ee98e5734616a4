"""Sparse ephemerality-gated monocular visual odometry.

FAST corners matched with BRIEF descriptors form feature tracks; each track
carries the ephemerality of its reference pixel, and tracks at or above the
threshold are excluded from the damped Gauss-Newton reprojection solve. A
mask-free RANSAC mode serves as the consensus baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, InsufficientFeaturesError
from .geometry import CameraModel, Feature, Pose, back_project_many, se3_exp
from .imageops import bilinear, box_blur

FAST_OFFSETS = np.array(
    [
        (0, -3), (1, -3), (2, -2), (3, -1),
        (3, 0), (3, 1), (2, 2), (1, 3),
        (0, 3), (-1, 3), (-2, 2), (-3, 1),
        (-3, 0), (-3, -1), (-2, -2), (-1, -3),
    ],
    dtype=np.int64,
)  # (du, dv) around the Bresenham circle of radius 3

BRIEF_BITS = 256
BRIEF_PATCH = 31
_BRIEF_BORDER = BRIEF_PATCH // 2 + 1


def _make_brief_pattern() -> np.ndarray:
    """Fixed sampling pattern: Gaussian pairs in a 31x31 patch, reproducible
    across runs and platforms via a pinned PCG64 stream."""
    gen = np.random.Generator(np.random.PCG64(0x5EED_B61F))
    pattern = np.clip(
        np.rint(gen.normal(0.0, BRIEF_PATCH / 5.0, size=(BRIEF_BITS, 4))),
        -(BRIEF_PATCH // 2),
        BRIEF_PATCH // 2,
    ).astype(np.int64)
    return pattern


BRIEF_PATTERN = _make_brief_pattern()

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


@dataclass(frozen=True)
class SparseVoConfig:
    tau: float = 0.5
    fast_threshold: float = 0.06  # intensity units, images in [0, 1]
    brief_bits: int = BRIEF_BITS
    max_features: int = 600
    max_iterations: int = 50
    convergence_eps: float = 1e-10
    huber_off: bool = True  # plain squared error by default
    huber_delta_px: float = 1.0
    method: str = "ephemerality"  # ephemerality | unmasked | ransac
    unlabelled_policy: str = "static"
    eph_sample_radius: int = 16  # full descriptor support: patch-max ephemerality
    max_translation_std: float = 0.02  # metres; weaker solves fall back
    ransac_iterations: int = 100
    ransac_inlier_px: float = 2.0
    seed: int = 7

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must be in (0, 1]")
        if self.max_features < 10:
            raise ConfigError("max_features must be at least 10")
        if self.method not in ("ephemerality", "unmasked", "ransac"):
            raise ConfigError(f"unknown sparse method {self.method!r}")


@dataclass
class FeatureTrack:
    prev: Feature
    curr_pixel: tuple
    ephemerality: float


@dataclass
class SolveStats:
    iterations: int = 0
    gated_count: int = 0
    track_count: int = 0
    residual_rms: float = np.nan
    residuals: np.ndarray | None = None
    translation_std: float = np.nan  # predicted 1-sigma of the translation
    fallback: bool = False


def detect_features(image: np.ndarray, config: SparseVoConfig) -> np.ndarray:
    """FAST-9 corners: (N, 2) array of integer (u, v), strongest first.

    Corner test: at least 9 contiguous circle pixels all brighter than
    center + threshold or all darker than center - threshold. Score is the
    summed absolute contrast of qualifying circle pixels; 3x3 non-maximum
    suppression breaks ties toward raster order, the final ordering is by
    (score desc, v, u).
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if h < 32 or w < 32:
        raise DataError("image too small for feature detection")
    t = config.fast_threshold
    center = img[3 : h - 3, 3 : w - 3]
    bright = np.empty((16,) + center.shape, dtype=bool)
    dark = np.empty_like(bright)
    excess = np.zeros(center.shape)
    deficit = np.zeros(center.shape)
    for k, (du, dv) in enumerate(FAST_OFFSETS):
        shifted = img[3 + dv : h - 3 + dv, 3 + du : w - 3 + du]
        diff = shifted - center
        bright[k] = diff > t
        dark[k] = diff < -t
        excess += np.where(bright[k], diff - t, 0.0)
        deficit += np.where(dark[k], -diff - t, 0.0)

    def contiguous9(masks):
        hit = np.zeros(center.shape, dtype=bool)
        for s in range(16):
            arc = masks[s]
            for k in range(1, 9):
                arc = arc & masks[(s + k) % 16]
            hit |= arc
        return hit

    corner = contiguous9(bright) | contiguous9(dark)
    if not corner.any():
        return np.empty((0, 2), dtype=np.int64)
    score_small = np.where(corner, np.maximum(excess, deficit), -np.inf)
    score = np.full((h, w), -np.inf)
    score[3 : h - 3, 3 : w - 3] = score_small

    # 3x3 NMS; raster-earlier pixels win ties
    padded = np.pad(score, 1, constant_values=-np.inf)
    keep = np.isfinite(score)
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            if du == 0 and dv == 0:
                continue
            neighbour = padded[1 + dv : 1 + dv + h, 1 + du : 1 + du + w]
            earlier = (dv < 0) or (dv == 0 and du < 0)
            if earlier:
                keep &= score > neighbour
            else:
                keep &= score >= neighbour
    vs, us = np.nonzero(keep)
    order = np.lexsort((us, vs, -score[vs, us]))
    order = order[: config.max_features]
    return np.stack([us[order], vs[order]], axis=1)


def describe_features(image: np.ndarray, points: np.ndarray):
    """BRIEF-256 descriptors for corners with a full smoothing patch.

    Returns (descriptors (M, 32) uint8, kept) where kept indexes into
    `points`.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    kept = np.flatnonzero(
        (pts[:, 0] >= _BRIEF_BORDER)
        & (pts[:, 0] < w - _BRIEF_BORDER)
        & (pts[:, 1] >= _BRIEF_BORDER)
        & (pts[:, 1] < h - _BRIEF_BORDER)
    )
    if len(kept) == 0:
        return np.empty((0, BRIEF_BITS // 8), dtype=np.uint8), kept
    smoothed = box_blur(img, radius=2)
    us = pts[kept, 0][:, None]
    vs = pts[kept, 1][:, None]
    x1, y1, x2, y2 = (BRIEF_PATTERN[:, i][None, :] for i in range(4))
    a = smoothed[vs + y1, us + x1]
    b = smoothed[vs + y2, us + x2]
    bits = (a < b).astype(np.uint8)
    return np.packbits(bits, axis=1), kept


def _popcount64(x: np.ndarray) -> np.ndarray:
    # SWAR bit count per uint64 lane
    m1 = np.uint64(0x5555555555555555)
    m2 = np.uint64(0x3333333333333333)
    m4 = np.uint64(0x0F0F0F0F0F0F0F0F)
    h01 = np.uint64(0x0101010101010101)
    x = x - ((x >> np.uint64(1)) & m1)
    x = (x & m2) + ((x >> np.uint64(2)) & m2)
    x = (x + (x >> np.uint64(4))) & m4
    return (x * h01) >> np.uint64(56)


def match_descriptors(ref_desc: np.ndarray, cur_desc: np.ndarray, bits: int = BRIEF_BITS) -> np.ndarray:
    """Mutual nearest neighbours under Hamming distance, gated at bits/4.

    Returns (K, 2) pairs of (ref_index, cur_index); ties resolve to the
    lowest index via argmin.
    """
    if len(ref_desc) == 0 or len(cur_desc) == 0:
        return np.empty((0, 2), dtype=np.int64)
    a = np.ascontiguousarray(ref_desc).view(np.uint64)
    b = np.ascontiguousarray(cur_desc).view(np.uint64)
    dist = _popcount64(a[:, None, :] ^ b[None, :, :]).sum(axis=2)
    fwd = np.argmin(dist, axis=1)
    bwd = np.argmin(dist, axis=0)
    ref_idx = np.arange(len(ref_desc))
    mutual = bwd[fwd] == ref_idx
    good = mutual & (dist[ref_idx, fwd] <= bits // 4)
    return np.stack([ref_idx[good], fwd[good]], axis=1)


def gate(track: FeatureTrack, tau: float) -> bool:
    """Keep a track only while its ephemerality is strictly below tau."""
    return track.ephemerality < tau


def build_tracks(
    ref_points: np.ndarray,
    cur_points: np.ndarray,
    matches: np.ndarray,
    disparity: np.ndarray,
    eph_values: np.ndarray,
    eph_sample_radius: int = 0,
) -> list:
    """Assemble FeatureTracks from matched corners and reference-frame maps.

    With a positive `eph_sample_radius` a feature inherits the maximum
    ephemerality within that window: its measurement is supported by the
    whole descriptor patch, so a patch touching a mover is unreliable even
    when the centre pixel is not.
    """
    tracks = []
    if len(matches) == 0:
        return tracks
    if eph_sample_radius > 0:
        from scipy.ndimage import maximum_filter

        eph_values = maximum_filter(eph_values, size=2 * eph_sample_radius + 1, mode="nearest")
    ru = ref_points[matches[:, 0], 0].astype(np.float64)
    rv = ref_points[matches[:, 0], 1].astype(np.float64)
    d, d_ok = bilinear(disparity, ru, rv)
    e, e_ok = bilinear(eph_values, ru, rv)
    for i in range(len(matches)):
        if not (d_ok[i] and d[i] > 0):
            continue
        cu, cv = cur_points[matches[i, 1]]
        tracks.append(
            FeatureTrack(
                prev=Feature(u=ru[i], v=rv[i], d=float(d[i])),
                curr_pixel=(float(cu), float(cv)),
                ephemerality=float(e[i]) if e_ok[i] else 0.0,
            )
        )
    return tracks


def _track_arrays(tracks, cam: CameraModel):
    pts = back_project_many(
        cam,
        np.array([t.prev.u for t in tracks]),
        np.array([t.prev.v for t in tracks]),
        np.array([t.prev.d for t in tracks]),
    )
    meas = np.array([t.curr_pixel for t in tracks], dtype=np.float64)
    return pts, meas


def _residuals_jacobian(pts_ref, meas, cam: CameraModel, xi: Pose, want_jacobian=True):
    q = pts_ref @ xi.rotation.T + xi.translation
    z = q[:, 2]
    ok = z > 1e-3
    zs = np.where(ok, z, 1.0)
    u = cam.fx * q[:, 0] / zs + cam.cx
    v = cam.fy * q[:, 1] / zs + cam.cy
    r = meas - np.stack([u, v], axis=1)
    if not want_jacobian:
        return r, ok
    inv_z = 1.0 / zs
    jproj = np.zeros((len(q), 2, 3))
    jproj[:, 0, 0] = cam.fx * inv_z
    jproj[:, 0, 2] = -cam.fx * q[:, 0] * inv_z**2
    jproj[:, 1, 1] = cam.fy * inv_z
    jproj[:, 1, 2] = -cam.fy * q[:, 1] * inv_z**2
    jpoint = np.zeros((len(q), 3, 6))
    jpoint[:, 0, 0] = jpoint[:, 1, 1] = jpoint[:, 2, 2] = 1.0
    jpoint[:, 0, 4] = q[:, 2]
    jpoint[:, 0, 5] = -q[:, 1]
    jpoint[:, 1, 3] = -q[:, 2]
    jpoint[:, 1, 5] = q[:, 0]
    jpoint[:, 2, 3] = q[:, 1]
    jpoint[:, 2, 4] = -q[:, 0]
    jac = jproj @ jpoint  # d(projection)/d(twist), left-multiplied update
    return r, ok, jac


def _weighted_cost(r, ok, weights):
    r2 = np.einsum("ij,ij->i", r, r)
    return float(np.sum(weights * r2 * ok))


def solve_pose(tracks, cam: CameraModel, config: SparseVoConfig, initial: Pose | None = None):
    """Damped Gauss-Newton on the 6-dof twist over gated reprojection errors."""
    gated = [t for t in tracks if gate(t, config.tau)] if config.method == "ephemerality" else list(tracks)
    if len(gated) < 6:
        raise InsufficientFeaturesError(
            f"{len(gated)} gated tracks of {len(tracks)}; need at least 6"
        )
    pts_ref, meas = _track_arrays(gated, cam)
    xi = Pose.identity() if initial is None else initial
    lam = 1e-4
    weights = np.ones(len(gated))
    r, ok = _residuals_jacobian(pts_ref, meas, cam, xi, want_jacobian=False)
    cost = _weighted_cost(r, ok, weights)
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        r, ok, jac = _residuals_jacobian(pts_ref, meas, cam, xi)
        if not config.huber_off:
            norms = np.linalg.norm(r, axis=1)
            weights = np.where(norms > config.huber_delta_px, config.huber_delta_px / np.maximum(norms, 1e-12), 1.0)
            # weights changed: rebase the acceptance cost under them
            cost = _weighted_cost(r, ok, weights)
        wj = jac * (weights * ok)[:, None, None]
        h = np.einsum("nij,nik->jk", wj, jac)
        g = np.einsum("nij,ni->j", wj, r)
        accepted = False
        smallest_increase = np.inf
        for _ in range(5):
            try:
                damping = np.diag(np.diag(h)) + 1e-12 * np.eye(6)
                delta = np.linalg.solve(h + lam * damping, g)
            except np.linalg.LinAlgError as e:
                raise DivergenceError(f"normal equations singular: {e}") from e
            if np.linalg.norm(delta) < config.convergence_eps:
                rms = np.sqrt(cost / max(ok.sum(), 1))
                return xi, SolveStats(iterations, len(gated), len(tracks), rms, np.linalg.norm(r, axis=1))
            candidate = se3_exp(delta).compose(xi)
            r_new, ok_new = _residuals_jacobian(pts_ref, meas, cam, candidate, want_jacobian=False)
            new_cost = _weighted_cost(r_new, ok_new, weights)
            if new_cost < cost:
                xi, cost = candidate, new_cost
                lam = max(lam / 10.0, 1e-4)
                accepted = True
                break
            smallest_increase = min(smallest_increase, new_cost - cost)
            lam *= 10.0
        if not accepted:
            # rejected even under heavy damping: if the best candidate was a
            # machine-precision tie we are at the minimum, otherwise diverge
            if smallest_increase <= 1e-10 * (1.0 + cost):
                break
            raise DivergenceError(
                f"cost stuck at {cost:.3e} after 5 damped retries (iteration {iterations})"
            )
        if np.linalg.norm(delta) < config.convergence_eps:
            break
    r, ok = _residuals_jacobian(pts_ref, meas, cam, xi, want_jacobian=False)
    rms = np.sqrt(_weighted_cost(r, ok, np.ones(len(gated))) / max(ok.sum(), 1))
    return xi, SolveStats(iterations, len(gated), len(tracks), rms, np.linalg.norm(r, axis=1))


def solve_pose_consensus(tracks, cam: CameraModel, config: SparseVoConfig):
    """Hypothesize-and-verify over minimal 6-track subsets, then a plain
    squared-error refit on the winning inlier set.

    This is the shared mismatch-rejection machinery of the sparse pipeline;
    the ephemerality mode feeds it only gated tracks, the baseline feeds it
    everything.
    """
    if len(tracks) < 6:
        raise InsufficientFeaturesError(f"{len(tracks)} tracks; need at least 6")
    pts_ref, meas = _track_arrays(tracks, cam)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    subset_cfg = SparseVoConfig(
        tau=config.tau,
        max_features=config.max_features,
        max_iterations=15,
        convergence_eps=1e-8,
        method="unmasked",
        seed=config.seed,
    )
    best_inliers = None
    best_count = -1
    for _ in range(config.ransac_iterations):
        pick = rng.choice(len(tracks), size=6, replace=False)
        try:
            candidate, _ = solve_pose([tracks[i] for i in pick], cam, subset_cfg)
        except (InsufficientFeaturesError, DivergenceError):
            continue
        r, ok = _residuals_jacobian(pts_ref, meas, cam, candidate, want_jacobian=False)
        inliers = ok & (np.linalg.norm(r, axis=1) < config.ransac_inlier_px)
        if int(inliers.sum()) > best_count:
            best_count = int(inliers.sum())
            best_inliers = inliers
            if best_count == len(tracks):
                break
    if best_inliers is None or best_count < 6:
        raise DivergenceError("no consensus among feature tracks")
    from dataclasses import replace

    refit_cfg = replace(subset_cfg, max_iterations=config.max_iterations, convergence_eps=config.convergence_eps)
    refined, stats = solve_pose(
        [t for t, keep in zip(tracks, best_inliers) if keep], cam, refit_cfg
    )
    stats.track_count = len(tracks)
    stats.gated_count = best_count

    # predicted translation uncertainty from the refit normal equations;
    # detections are integer pixels, so the noise floor is half a pixel-ish
    in_pts, in_meas = _track_arrays([t for t, k in zip(tracks, best_inliers) if k], cam)
    r, ok, jac = _residuals_jacobian(in_pts, in_meas, cam, refined)
    dof = max(2 * int(ok.sum()) - 6, 1)
    sigma2 = max(float(np.sum(r[ok] ** 2)) / dof, 0.29**2)
    h = np.einsum("nij,nik->jk", jac * ok[:, None, None], jac)
    try:
        cov = sigma2 * np.linalg.inv(h)
        stats.translation_std = float(np.sqrt(max(np.linalg.eigvalsh(cov[:3, :3]).max(), 0.0)))
    except np.linalg.LinAlgError:
        stats.translation_std = np.inf
    return refined, stats


# the mask-free comparison baseline keeps its own name
solve_pose_ransac = solve_pose_consensus


@dataclass
class FrameDiagnostics:
    frame: int
    tracks: int = 0
    gated: int = 0
    trimmed: int = 0
    iterations: int = 0
    residual_rms: float = np.nan
    fallback: bool = False


def run_sequence(source, provider, cam: CameraModel, config: SparseVoConfig):
    """Frame-to-frame sparse VO over a frame source.

    `source` exposes frame_count(), intensity(i), timestamp_ns(i);
    `provider` maps a frame id to a FramePrediction. Returns (Trajectory,
    diagnostics list). Solver failures fall back to constant velocity.
    """
    from .geometry import Trajectory
    from .masks import resolve_unlabelled

    n = source.frame_count()
    if n < 2:
        raise DataError("need at least 2 frames")
    poses = [Pose.identity()]
    timestamps = [source.timestamp_ns(0)]
    diagnostics = []
    last_xi = Pose.identity()

    prev_img = source.intensity(0)
    prev_points = detect_features(prev_img, config)
    prev_desc, prev_kept = describe_features(prev_img, prev_points)
    prev_points = prev_points[prev_kept]
    prev_pred = provider(0)

    for i in range(1, n):
        cur_img = source.intensity(i)
        cur_points = detect_features(cur_img, config)
        cur_desc, cur_kept = describe_features(cur_img, cur_points)
        cur_points = cur_points[cur_kept]
        diag = FrameDiagnostics(frame=i)
        matches = match_descriptors(prev_desc, cur_desc, config.brief_bits)
        eph = resolve_unlabelled(prev_pred.ephemerality, config.unlabelled_policy)
        tracks = build_tracks(
            prev_points, cur_points, matches, prev_pred.disparity, eph, config.eph_sample_radius
        )
        diag.tracks = len(tracks)
        try:
            used = [t for t in tracks if gate(t, config.tau)] if config.method == "ephemerality" else tracks
            diag.gated = len(used)
            xi, stats = solve_pose_consensus(used, cam, config)
            if stats.translation_std > config.max_translation_std:
                # geometrically uninformative (e.g. one thin strip of
                # features): the constant-velocity prior is more reliable
                raise InsufficientFeaturesError(
                    f"translation std {stats.translation_std:.3f} m exceeds gate"
                )
            diag.trimmed = len(used) - stats.gated_count
            diag.iterations = stats.iterations
            diag.residual_rms = stats.residual_rms
            last_xi = xi
        except (InsufficientFeaturesError, DivergenceError):
            xi = last_xi
            diag.fallback = True
        poses.append(poses[-1].compose(xi.inverse()))
        timestamps.append(source.timestamp_ns(i))
        diagnostics.append(diag)
        prev_img, prev_points, prev_desc = cur_img, cur_points, cur_desc
        prev_pred = provider(i)
    return Trajectory(np.array(timestamps, dtype=np.int64), poses), diagnostics
