"""Dense photometric monocular VO with ephemerality-weighted residuals.

Every reference-keyframe pixel with valid disparity is warped into the
current image; the photometric error is weighted by (1 - E) so ephemeral
content contributes nothing. Alignment runs coarse-to-fine over a box-filter
pyramid with Levenberg-damped Gauss-Newton at each level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, InsufficientOverlapError
from .geometry import CameraModel, Pose, back_project_many, se3_exp, se3_log
from .imageops import bilinear, bilinear_with_gradient, box_downsample, image_gradients


@dataclass(frozen=True)
class DenseVoConfig:
    pyramid_levels: int = 4
    max_iterations_per_level: int = 30
    convergence_eps: float = 1e-8
    keyframe_translation_gate: float = 0.3  # metres
    keyframe_rotation_gate: float = 0.05  # radians
    min_gradient: float = 0.0  # keyframe gradient floor; 0 keeps every pixel
    min_valid_fraction: float = 0.1
    weighted: bool = True  # False = unweighted photometric baseline
    unlabelled_policy: str = "static"

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        if not 0.0 <= self.min_valid_fraction <= 1.0:
            raise ConfigError("min_valid_fraction must be in [0, 1]")


@dataclass
class Keyframe:
    """Reference frame: intensity, disparity, resolved ephemerality weights,
    absolute pose, and the precomputed intensity gradient."""

    intensity: np.ndarray
    disparity: np.ndarray
    ephemerality: np.ndarray  # resolved values in [0, 1], no NaN
    pose: Pose
    gradient: np.ndarray  # (H, W, 2) central differences of intensity

    @classmethod
    def build(cls, intensity, disparity, ephemerality_values, pose: Pose) -> "Keyframe":
        intensity = np.asarray(intensity, dtype=np.float64)
        disparity = np.asarray(disparity, dtype=np.float64)
        eph = np.asarray(ephemerality_values, dtype=np.float64)
        if intensity.shape != disparity.shape or intensity.shape != eph.shape:
            raise DataError("keyframe images must share dimensions")
        gx, gy = image_gradients(intensity)
        return cls(intensity, disparity, eph, pose, np.stack([gx, gy], axis=-1))


def _downsample_disparity(disp: np.ndarray) -> np.ndarray:
    """Nearest-valid 2x decimation; disparity halves with the focal length."""
    h2, w2 = disp.shape[0] // 2, disp.shape[1] // 2
    c = disp[: 2 * h2, : 2 * w2]
    quads = np.stack([c[0::2, 0::2], c[0::2, 1::2], c[1::2, 0::2], c[1::2, 1::2]])
    out = np.full((h2, w2), np.nan)
    for q in quads[::-1]:  # earlier quadrants take precedence
        out = np.where(np.isfinite(q), q, out)
    return out * 0.5


def _downsample_eph(eph: np.ndarray) -> np.ndarray:
    """Max-pool 2x decimation: a pixel is as ephemeral as its worst child."""
    h2, w2 = eph.shape[0] // 2, eph.shape[1] // 2
    c = eph[: 2 * h2, : 2 * w2]
    return np.maximum.reduce([c[0::2, 0::2], c[0::2, 1::2], c[1::2, 0::2], c[1::2, 1::2]])


class KeyframePyramid:
    """Per-level reference data precomputed once per keyframe."""

    def __init__(self, kf: Keyframe, cam: CameraModel, config: DenseVoConfig):
        self.kf = kf
        self.levels = []
        intensity, disparity, eph = kf.intensity, kf.disparity, kf.ephemerality
        level_cam = cam
        for level in range(config.pyramid_levels):
            if level > 0:
                intensity = box_downsample(intensity)
                disparity = _downsample_disparity(disparity)
                eph = _downsample_eph(eph)
                level_cam = level_cam.scaled(0.5)
            gx, gy = image_gradients(intensity)
            grad_mag = np.hypot(gx, gy)
            valid = np.isfinite(disparity) & (disparity > 0)
            if config.min_gradient > 0:
                valid &= grad_mag >= config.min_gradient
            vs, us = np.nonzero(valid)
            points = back_project_many(
                level_cam, us.astype(np.float64), vs.astype(np.float64), disparity[vs, us]
            )
            weights = (1.0 - eph[vs, us]) if config.weighted else np.ones(len(vs))
            self.levels.append(
                {
                    "cam": level_cam,
                    "ref_intensity": intensity[vs, us],
                    "points": points,
                    "weights": weights,
                    "pixel_count": intensity.size,
                }
            )


def _current_pyramid(current: np.ndarray, levels: int):
    imgs = [np.asarray(current, dtype=np.float64)]
    for _ in range(levels - 1):
        imgs.append(box_downsample(imgs[-1]))
    return imgs


def _level_cost(level, cur_img, xi: Pose):
    """Weighted photometric cost of one pyramid level at pose xi.

    Returns (cost_sum, valid_count, mean_cost): pixels whose warp leaves the
    current image are excluded and not counted.
    """
    cam = level["cam"]
    q = level["points"] @ xi.rotation.T + xi.translation
    z = q[:, 2]
    in_front = z > 1e-6
    zs = np.where(in_front, z, 1.0)
    u = cam.fx * q[:, 0] / zs + cam.cx
    v = cam.fy * q[:, 1] / zs + cam.cy
    sampled, ok = bilinear(cur_img, u, v)
    ok &= in_front
    r = np.where(ok, level["ref_intensity"] - sampled, 0.0)
    w = level["weights"] * ok
    cost = float(np.sum(w * r * r))
    count = int(ok.sum())
    return cost, count, cost / max(count, 1)


def photometric_cost(kf: Keyframe, current: np.ndarray, xi: Pose, cam: CameraModel, config: DenseVoConfig | None = None):
    """Full-resolution weighted photometric cost; (cost, valid_count)."""
    config = DenseVoConfig() if config is None else config
    pyramid = KeyframePyramid(kf, cam, DenseVoConfig(pyramid_levels=1, weighted=config.weighted, min_gradient=config.min_gradient))
    level = pyramid.levels[0]
    cost, count, _ = _level_cost(level, np.asarray(current, dtype=np.float64), xi)
    if count < config.min_valid_fraction * level["pixel_count"]:
        raise InsufficientOverlapError(f"only {count} of {level['pixel_count']} pixels overlap")
    return cost, count


def _solve_level(level, img, xi: Pose, config: DenseVoConfig):
    """LM iterations on one pyramid level; returns (pose, iterations, costs)."""
    cam = level["cam"]
    points = level["points"]
    weights_all = level["weights"]
    ref_i = level["ref_intensity"]

    def evaluate(pose):
        q = points @ pose.rotation.T + pose.translation
        z = q[:, 2]
        in_front = z > 1e-6
        zs = np.where(in_front, z, 1.0)
        u = cam.fx * q[:, 0] / zs + cam.cx
        v = cam.fy * q[:, 1] / zs + cam.cy
        sampled, gx, gy, ok = bilinear_with_gradient(img, u, v)
        ok &= in_front
        r = np.where(ok, ref_i - sampled, 0.0)
        w = weights_all * ok
        return q, gx, gy, r, w, ok

    q, gx, gy, r, w, ok = evaluate(xi)
    count = int(ok.sum())
    if count < config.min_valid_fraction * level["pixel_count"]:
        raise InsufficientOverlapError(f"only {count} of {level['pixel_count']} pixels overlap")
    cost = np.sum(w * r * r) / max(count, 1)
    lam = 1e-4
    costs = [cost]
    iterations = 0
    for iterations in range(1, config.max_iterations_per_level + 1):
        z = np.where(ok, q[:, 2], 1.0)
        inv_z = 1.0 / z
        # d(pixel)/d(twist) through projection and left-multiplied motion
        ju = np.empty((len(q), 6))
        jv = np.empty((len(q), 6))
        fx_z = cam.fx * inv_z
        fy_z = cam.fy * inv_z
        x, y = q[:, 0], q[:, 1]
        ju[:, 0] = fx_z
        ju[:, 1] = 0.0
        ju[:, 2] = -fx_z * x * inv_z
        ju[:, 3] = -fx_z * x * y * inv_z
        ju[:, 4] = cam.fx + fx_z * x * x * inv_z
        ju[:, 5] = -fx_z * y
        jv[:, 0] = 0.0
        jv[:, 1] = fy_z
        jv[:, 2] = -fy_z * y * inv_z
        jv[:, 3] = -cam.fy - fy_z * y * y * inv_z
        jv[:, 4] = fy_z * x * y * inv_z
        jv[:, 5] = fy_z * x
        a = gx[:, None] * ju + gy[:, None] * jv  # d(I_c o warp)/d(twist)
        wa = a * w[:, None]
        h = wa.T @ a
        g = wa.T @ r
        accepted = False
        smallest_increase = np.inf
        for _ in range(5):
            try:
                damping = np.diag(np.diag(h)) + 1e-12 * np.eye(6)
                delta = np.linalg.solve(h + lam * damping, g)
            except np.linalg.LinAlgError as e:
                raise DivergenceError(f"dense normal equations singular: {e}") from e
            if np.linalg.norm(delta) < config.convergence_eps:
                return xi, iterations, costs
            candidate = se3_exp(delta).compose(xi)
            q2, gx2, gy2, r2, w2, ok2 = evaluate(candidate)
            count2 = int(ok2.sum())
            if count2 < config.min_valid_fraction * level["pixel_count"]:
                lam *= 10.0
                continue
            new_cost = np.sum(w2 * r2 * r2) / max(count2, 1)
            if new_cost < cost:
                xi, cost = candidate, new_cost
                q, gx, gy, r, w, ok = q2, gx2, gy2, r2, w2, ok2
                costs.append(cost)
                lam = max(lam / 10.0, 1e-2)
                accepted = True
                break
            smallest_increase = min(smallest_increase, new_cost - cost)
            lam *= 10.0
        if not accepted:
            # Rejected even under heavy damping. Near the optimum the linear
            # model disagrees with the piecewise-bilinear cost surface by a
            # small relative amount, so a sub-0.01% best increase means the
            # level is converged; only NaN or a genuine rise is divergence.
            if smallest_increase <= 1e-4 * (cost + 1e-12):
                break
            raise DivergenceError(f"dense cost stuck at {cost:.3e} (level iteration {iterations})")
        if np.linalg.norm(delta) < config.convergence_eps:
            break
    return xi, iterations, costs


@dataclass
class DenseStats:
    iterations_per_level: list
    final_rms: float = np.nan
    costs_per_level: list | None = None
    fallback: bool = False


def solve_pose_dense(pyramid: KeyframePyramid, current: np.ndarray, config: DenseVoConfig, initial: Pose | None = None):
    """Coarse-to-fine photometric alignment against a keyframe pyramid."""
    cur_levels = _current_pyramid(current, config.pyramid_levels)
    xi = Pose.identity() if initial is None else initial
    iterations = []
    costs_per_level = []
    for level_idx in range(config.pyramid_levels - 1, -1, -1):
        xi, iters, costs = _solve_level(pyramid.levels[level_idx], cur_levels[level_idx], xi, config)
        iterations.append(iters)
        costs_per_level.append(costs)
    final_cost, count, mean = _level_cost(pyramid.levels[0], cur_levels[0], xi)
    stats = DenseStats(iterations, np.sqrt(mean), costs_per_level)
    return xi, stats


def run_sequence_dense(source, provider, cam: CameraModel, config: DenseVoConfig):
    """Keyframe-based dense VO over a frame source.

    A new keyframe is created when motion since the last keyframe exceeds
    either gate. Returns (Trajectory, diagnostics list).
    """
    from .geometry import Trajectory
    from .masks import resolve_unlabelled

    n = source.frame_count()
    if n < 2:
        raise DataError("need at least 2 frames")

    def make_keyframe(frame_id, pose):
        pred = provider(frame_id)
        eph = resolve_unlabelled(pred.ephemerality, config.unlabelled_policy)
        kf = Keyframe.build(source.intensity(frame_id), pred.disparity, eph, pose)
        return KeyframePyramid(kf, cam, config)

    poses = [Pose.identity()]
    timestamps = [source.timestamp_ns(0)]
    diagnostics = []
    pyramid = make_keyframe(0, poses[0])
    xi_kf = Pose.identity()  # keyframe -> latest frame
    last_step = Pose.identity()  # previous frame -> current, fallback motion
    for i in range(1, n):
        current = source.intensity(i)
        prev_abs = poses[-1]
        diag = {"frame": i, "keyframe": False, "fallback": False}
        try:
            init = last_step.compose(xi_kf)
            xi, stats = solve_pose_dense(pyramid, current, config, initial=init)
            diag["iterations"] = sum(stats.iterations_per_level)
            diag["residual_rms"] = stats.final_rms
        except (InsufficientOverlapError, DivergenceError):
            xi = last_step.compose(xi_kf)
            diag["fallback"] = True
        abs_pose = pyramid.kf.pose.compose(xi.inverse())
        last_step = abs_pose.inverse().compose(prev_abs)  # maps frame i-1 -> i
        poses.append(abs_pose)
        timestamps.append(source.timestamp_ns(i))
        xi_kf = xi
        translation = np.linalg.norm(xi.translation)
        angle = np.linalg.norm(se3_log(xi)[3:])
        if translation > config.keyframe_translation_gate or angle > config.keyframe_rotation_gate:
            pyramid = make_keyframe(i, abs_pose)
            xi_kf = Pose.identity()
            diag["keyframe"] = True
        diagnostics.append(diag)
    return Trajectory(np.array(timestamps, dtype=np.int64), poses), diagnostics
