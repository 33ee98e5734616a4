import numpy as np
import pytest

from conftest import random_pose
from ephemvo.errors import DataError
from ephemvo.evaluation import (
    DriftReport,
    align_by_timestamp,
    distractor_frames_from_coverage,
    drift,
    finite_difference_speeds,
    velocity_errors,
)
from ephemvo.geometry import Pose, Trajectory, se3_exp


def straight_trajectory(n, step, dt_ns=100_000_000, start_ts=0):
    poses = [Pose(np.eye(3), np.array([0.0, 0.0, step * i])) for i in range(n)]
    ts = start_ts + np.arange(n, dtype=np.int64) * dt_ns
    return Trajectory(ts, poses)


def random_trajectory(rng, n, dt_ns=100_000_000):
    poses = [Pose.identity()]
    for _ in range(n - 1):
        step = se3_exp(np.concatenate([rng.uniform(-1.5, 1.5, 3), rng.uniform(-0.08, 0.08, 3)]))
        poses.append(poses[-1].compose(step))
    ts = np.arange(n, dtype=np.int64) * dt_ns
    return Trajectory(ts, poses)


def naive_drift(estimate, reference, lengths):
    """Independent reference implementation with plain 4x4 matrix algebra."""
    ref = [p.matrix() for p in reference.poses]
    est = [p.matrix() for p in estimate.poses]
    arcs = [0.0]
    for i in range(1, len(ref)):
        arcs.append(arcs[-1] + float(np.linalg.norm(ref[i][:3, 3] - ref[i - 1][:3, 3])))
    sums = {}
    for length in lengths:
        t_sum, r_sum, count = 0.0, 0.0, 0
        for start in range(len(ref)):
            end = None
            for j in range(start, len(ref)):
                if arcs[j] >= arcs[start] + length:
                    end = j
                    break
            if end is None:
                continue
            rel_ref = np.linalg.inv(ref[start]) @ ref[end]
            rel_est = np.linalg.inv(est[start]) @ est[end]
            if np.array_equal(rel_ref, rel_est):
                count += 1
                continue
            err = np.linalg.inv(rel_est) @ rel_ref
            seg = arcs[end] - arcs[start]
            t_sum += np.linalg.norm(err[:3, 3]) / seg
            r_sum += np.arccos(np.clip(0.5 * (np.trace(err[:3, :3]) - 1.0), -1, 1)) / seg
            count += 1
        if count:
            sums[length] = (100.0 * t_sum / count, np.degrees(r_sum / count), count)
    total_t = sum(v[0] / 100.0 * v[2] for v in sums.values())
    total_r = sum(np.radians(v[1]) * v[2] for v in sums.values())
    total_n = sum(v[2] for v in sums.values())
    return (100.0 * total_t / total_n, np.degrees(total_r / total_n), sums)


class TestDrift:
    def test_self_is_exactly_zero(self, rng):
        traj = random_trajectory(rng, 60)
        report = drift(traj, traj, [10.0, 25.0])
        assert report.translation_percent == 0.0
        assert report.rotation_deg_per_m == 0.0

    def test_five_percent_scale_error(self):
        reference = straight_trajectory(1001, 1.0)  # 1 km straight line
        scaled = Trajectory(
            reference.timestamps_ns.copy(),
            [Pose(p.rotation, p.translation * 1.05) for p in reference.poses],
        )
        report = drift(scaled, reference, [100.0, 200.0, 400.0, 800.0])
        assert abs(report.translation_percent - 5.0) <= 0.1
        assert report.rotation_deg_per_m == 0.0

    def test_matches_naive_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(20, 60))
            reference = random_trajectory(rng, n)
            estimate = random_trajectory(rng, n)
            lengths = [5.0, 15.0, 40.0]
            report = drift(estimate, reference, lengths)
            t_naive, r_naive, per = naive_drift(estimate, reference, lengths)
            assert abs(report.translation_percent - t_naive) < 1e-9
            assert abs(report.rotation_deg_per_m - r_naive) < 1e-9
            for length, (t, r, c) in per.items():
                rt, rr, rc = report.per_length[length]
                assert rc == c and abs(rt - t) < 1e-9 and abs(rr - r) < 1e-9

    def test_invariant_under_global_rigid_transform(self, rng):
        reference = random_trajectory(rng, 40)
        estimate = random_trajectory(rng, 40)
        g = random_pose(rng)
        ref2 = Trajectory(reference.timestamps_ns.copy(), [g.compose(p) for p in reference.poses])
        est2 = Trajectory(estimate.timestamps_ns.copy(), [g.compose(p) for p in estimate.poses])
        r1 = drift(estimate, reference, [10.0])
        r2 = drift(est2, ref2, [10.0])
        assert abs(r1.translation_percent - r2.translation_percent) < 1e-6
        assert abs(r1.rotation_deg_per_m - r2.rotation_deg_per_m) < 1e-6

    def test_short_reference_flagged(self):
        reference = straight_trajectory(11, 1.0)  # 10 m
        report = drift(reference, reference, [5.0, 100.0])
        assert 100.0 in report.skipped_lengths
        assert 5.0 in report.per_length

    def test_overall_is_count_weighted_mean(self, rng):
        reference = random_trajectory(rng, 50)
        estimate = random_trajectory(rng, 50)
        report = drift(estimate, reference, [5.0, 20.0])
        total = sum(c for _, _, c in report.per_length.values())
        t_expected = sum(t * c for t, _, c in report.per_length.values()) / total
        assert abs(report.translation_percent - t_expected) < 1e-9


class TestVelocity:
    def test_perfect_estimate_zero_error(self):
        traj = straight_trajectory(50, 0.5)  # 5 m/s at 10 Hz
        speeds = np.full(50, 5.0)
        report = velocity_errors(traj, traj.timestamps_ns, speeds, set())
        assert report.mean_abs_error_all < 1e-12

    def test_constant_bias(self):
        traj = straight_trajectory(50, 0.51)
        speeds = np.full(50, 5.0)
        report = velocity_errors(traj, traj.timestamps_ns, speeds, {3, 4, 5})
        assert abs(report.mean_abs_error_all - 0.1) < 1e-9
        assert abs(report.mean_abs_error_distractors - 0.1) < 1e-9

    def test_time_origin_invariance(self, rng):
        traj = straight_trajectory(30, 0.4)
        speeds = np.full(30, 4.0)
        r1 = velocity_errors(traj, traj.timestamps_ns, speeds, {5})
        shifted = Trajectory(traj.timestamps_ns + 777_000_000_000, traj.poses)
        r2 = velocity_errors(shifted, shifted.timestamps_ns, speeds, {5})
        assert r1.mean_abs_error_all == r2.mean_abs_error_all

    def test_histogram_sums_to_evaluated(self, rng):
        traj = random_trajectory(rng, 80)
        speeds = rng.uniform(0, 20, 80)  # large errors overflow into top bin
        report = velocity_errors(traj, traj.timestamps_ns, speeds, set())
        assert report.histogram_counts.sum() == report.evaluated_frames

    def test_missing_frames_excluded(self):
        traj = straight_trajectory(10, 0.5)
        ref_ts = np.arange(20, dtype=np.int64) * 100_000_000
        speeds = np.full(20, 5.0)
        report = velocity_errors(traj, ref_ts, speeds, {15})
        # distractor frame 15 has no matching estimate frame
        assert report.excluded_frames >= 1
        assert np.isnan(report.mean_abs_error_distractors)

    def test_finite_difference_speeds_central(self):
        traj = straight_trajectory(5, 1.0)
        speeds = finite_difference_speeds(traj)
        assert np.allclose(speeds, 10.0)


class TestHelpers:
    def test_align_by_timestamp_window(self):
        a = straight_trajectory(5, 1.0)
        b = Trajectory(a.timestamps_ns + 49_000_000, a.poses)
        est_idx, ref_idx = align_by_timestamp(a, b)
        assert len(est_idx) == 5
        c = Trajectory(a.timestamps_ns + 51_000_000, a.poses)
        est_idx, ref_idx = align_by_timestamp(a, c)
        assert len(est_idx) == 4  # only neighbouring frames within 50 ms

    def test_distractor_selection(self):
        frames = distractor_frames_from_coverage([0.0, 0.1, 0.25, 0.9, 0.2])
        assert frames == {2, 3}
