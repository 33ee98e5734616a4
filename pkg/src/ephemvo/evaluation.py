"""Trajectory evaluation: drift over fixed-length subsequences and
instantaneous velocity errors at distractor locations.

Drift follows the odometry-benchmark recipe: for every start frame and every
requested arc length, compare the relative motion of the estimate against
the reference over that stretch, reporting translation as a percentage of
the length and rotation as angle per metre.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geometry import Trajectory

ALIGN_TOLERANCE_NS = 50_000_000  # nearest-timestamp pairing window


@dataclass
class DriftReport:
    translation_percent: float
    rotation_deg_per_m: float
    per_length: dict = field(default_factory=dict)  # length -> (t%, deg/m, count)
    skipped_lengths: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "translation_percent": self.translation_percent,
            "rotation_deg_per_m": self.rotation_deg_per_m,
            "per_length": {
                str(length): {"translation_percent": t, "rotation_deg_per_m": r, "count": c}
                for length, (t, r, c) in sorted(self.per_length.items())
            },
            "skipped_lengths": list(self.skipped_lengths),
        }


@dataclass
class VelocityReport:
    mean_abs_error_all: float
    mean_abs_error_distractors: float
    histogram_counts: np.ndarray
    histogram_edges: np.ndarray
    evaluated_frames: int
    excluded_frames: int
    per_frame_error: np.ndarray

    def as_dict(self) -> dict:
        return {
            "mean_abs_error_all": self.mean_abs_error_all,
            "mean_abs_error_distractors": self.mean_abs_error_distractors,
            "evaluated_frames": self.evaluated_frames,
            "excluded_frames": self.excluded_frames,
            "histogram": {
                "edges": self.histogram_edges.tolist(),
                "counts": self.histogram_counts.tolist(),
            },
        }


def align_by_timestamp(estimate: Trajectory, reference: Trajectory):
    """Pair estimate frames with the nearest reference frame within 50 ms.

    Returns (est_indices, ref_indices).
    """
    ref_ts = reference.timestamps_ns
    order = np.argsort(ref_ts)
    sorted_ts = ref_ts[order]
    est_idx = []
    ref_idx = []
    for i, ts in enumerate(estimate.timestamps_ns):
        pos = np.searchsorted(sorted_ts, ts)
        best = None
        for cand in (pos - 1, pos):
            if 0 <= cand < len(sorted_ts):
                delta = abs(int(sorted_ts[cand]) - int(ts))
                if best is None or delta < best[0]:
                    best = (delta, order[cand])
        if best is not None and best[0] <= ALIGN_TOLERANCE_NS:
            est_idx.append(i)
            ref_idx.append(int(best[1]))
    return np.array(est_idx, dtype=np.int64), np.array(ref_idx, dtype=np.int64)


def _arc_lengths(positions: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _rotation_angle(r: np.ndarray) -> float:
    return float(np.arccos(np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)))


def drift(estimate: Trajectory, reference: Trajectory, lengths) -> DriftReport:
    """Average end-point error over all subsequences of each arc length."""
    lengths = [float(l) for l in lengths]
    if not lengths:
        raise DataError("no subsequence lengths requested")
    est_idx, ref_idx = align_by_timestamp(estimate, reference)
    if len(est_idx) < 2:
        raise DataError("trajectories share no aligned frames")
    est_mats = estimate.matrices()[est_idx]
    ref_mats = reference.matrices()[ref_idx]
    arcs = _arc_lengths(ref_mats[:, :3, 3])

    per_length = {}
    skipped = []
    total_t = 0.0
    total_r = 0.0
    total_n = 0
    for length in lengths:
        t_sum = 0.0
        r_sum = 0.0
        count = 0
        ends = np.searchsorted(arcs, arcs + length)
        for start in range(len(arcs)):
            end = ends[start]
            if end >= len(arcs):
                break
            rel_ref = np.linalg.inv(ref_mats[start]) @ ref_mats[end]
            rel_est = np.linalg.inv(est_mats[start]) @ est_mats[end]
            if np.array_equal(rel_ref, rel_est):
                count += 1  # identical motion: exactly zero error
                continue
            err = np.linalg.inv(rel_est) @ rel_ref
            seg = arcs[end] - arcs[start]
            t_sum += np.linalg.norm(err[:3, 3]) / seg
            r_sum += _rotation_angle(err[:3, :3]) / seg
            count += 1
        if count == 0:
            skipped.append(length)
            continue
        per_length[length] = (100.0 * t_sum / count, np.degrees(r_sum / count), count)
        total_t += t_sum
        total_r += r_sum
        total_n += count
    if total_n == 0:
        return DriftReport(0.0, 0.0, per_length, skipped)
    return DriftReport(
        translation_percent=100.0 * total_t / total_n,
        rotation_deg_per_m=float(np.degrees(total_r / total_n)),
        per_length=per_length,
        skipped_lengths=skipped,
    )


def finite_difference_speeds(traj: Trajectory) -> np.ndarray:
    """Per-frame speed from central differences (one-sided at the ends).

    Timestamp spans are differenced as integers before conversion so the
    result is exactly invariant to time-origin shifts.
    """
    positions = traj.positions()
    ts = traj.timestamps_ns
    n = len(positions)
    if n < 2:
        raise DataError("need at least two frames for speeds")
    speeds = np.empty(n)
    speeds[0] = np.linalg.norm(positions[1] - positions[0]) / ((ts[1] - ts[0]) / 1e9)
    speeds[-1] = np.linalg.norm(positions[-1] - positions[-2]) / ((ts[-1] - ts[-2]) / 1e9)
    if n > 2:
        span = (ts[2:] - ts[:-2]) / 1e9
        speeds[1:-1] = np.linalg.norm(positions[2:] - positions[:-2], axis=1) / span
    return speeds


def velocity_errors(
    estimate: Trajectory,
    reference_timestamps_ns,
    reference_speeds,
    distractor_frames,
    bin_width: float = 0.05,
    hist_range: tuple = (0.0, 2.0),
) -> VelocityReport:
    """Absolute speed error per frame, overall and on the distractor subset."""
    ref_ts = np.asarray(reference_timestamps_ns, dtype=np.int64)
    ref_speeds = np.asarray(reference_speeds, dtype=np.float64)
    if len(ref_ts) != len(ref_speeds):
        raise DataError("reference timestamp and speed counts differ")
    est_speeds = finite_difference_speeds(estimate)

    order = np.argsort(ref_ts)
    sorted_ts = ref_ts[order]
    errors = []
    err_by_ref_frame = {}
    excluded = 0
    for i, ts in enumerate(estimate.timestamps_ns):
        pos = np.searchsorted(sorted_ts, ts)
        best = None
        for cand in (pos - 1, pos):
            if 0 <= cand < len(sorted_ts):
                delta = abs(int(sorted_ts[cand]) - int(ts))
                if best is None or delta < best[0]:
                    best = (delta, order[cand])
        if best is None or best[0] > ALIGN_TOLERANCE_NS:
            excluded += 1
            continue
        err = abs(est_speeds[i] - ref_speeds[best[1]])
        errors.append(err)
        err_by_ref_frame[int(best[1])] = err
    if not errors:
        raise DataError("no estimate frames align with the reference")
    errors = np.array(errors)

    distractor_frames = set(int(f) for f in distractor_frames)
    missing = distractor_frames - set(err_by_ref_frame)
    excluded += len(missing)
    distractor_errors = np.array(
        [err_by_ref_frame[f] for f in sorted(distractor_frames & set(err_by_ref_frame))]
    )
    # clip into range so the top bin absorbs outliers and counts always sum
    # to the number of evaluated frames
    clipped = np.clip(errors, hist_range[0], np.nextafter(hist_range[1], hist_range[0]))
    counts, edges = np.histogram(clipped, bins=int(round((hist_range[1] - hist_range[0]) / bin_width)), range=hist_range)
    return VelocityReport(
        mean_abs_error_all=float(errors.mean()),
        mean_abs_error_distractors=float(distractor_errors.mean()) if len(distractor_errors) else np.nan,
        histogram_counts=counts,
        histogram_edges=edges,
        evaluated_frames=len(errors),
        excluded_frames=excluded,
        per_frame_error=errors,
    )


def distractor_frames_from_coverage(coverages, threshold: float = 0.2):
    """Frames whose mover-mask coverage exceeds the threshold."""
    return {i for i, c in enumerate(np.asarray(coverages)) if c > threshold}
