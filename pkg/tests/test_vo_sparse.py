import numpy as np
import pytest

from conftest import random_pose
from ephemvo.errors import InsufficientFeaturesError
from ephemvo.geometry import CameraModel, Feature, Pose, project, se3_exp, se3_log
from ephemvo.imageops import box_blur
from ephemvo.vo_sparse import (
    FeatureTrack,
    SparseVoConfig,
    describe_features,
    detect_features,
    gate,
    match_descriptors,
    solve_pose,
    solve_pose_ransac,
    _residuals_jacobian,
    _track_arrays,
)


def noise_image(rng, h=96, w=128):
    return box_blur(rng.uniform(0, 1, (h, w)), radius=1)


class TestDetect:
    def test_constant_image(self):
        img = np.full((64, 64), 0.5)
        assert len(detect_features(img, SparseVoConfig())) == 0

    def test_single_bright_dot(self):
        img = np.full((64, 64), 0.1)
        img[30, 40] = 0.9
        pts = detect_features(img, SparseVoConfig(fast_threshold=0.2))
        assert len(pts) >= 1
        d = np.linalg.norm(pts - np.array([40, 30]), axis=1)
        assert d.min() <= 1.0

    def test_square_grid_corners(self):
        h, w = 128, 160
        img = np.full((h, w), 0.1)
        corners = []
        for y0 in range(12, h - 20, 22):
            for x0 in range(12, w - 20, 22):
                img[y0 : y0 + 12, x0 : x0 + 12] = 0.9
                corners += [(x0, y0), (x0 + 11, y0), (x0, y0 + 11), (x0 + 11, y0 + 11)]
        pts = detect_features(img, SparseVoConfig(fast_threshold=0.1, max_features=2000))
        corners = np.array(corners)
        d = np.min(np.linalg.norm(pts[None, :, :] - corners[:, None, :], axis=2), axis=1)
        assert (d <= 1.0).mean() >= 0.9

    def test_max_features_and_determinism(self, rng):
        img = noise_image(rng)
        cfg = SparseVoConfig(fast_threshold=0.01, max_features=50)
        p1 = detect_features(img, cfg)
        p2 = detect_features(img, cfg)
        assert len(p1) <= 50
        assert np.array_equal(p1, p2)


class TestDescribeAndMatch:
    def test_identical_images_self_match(self, rng):
        img = noise_image(rng)
        cfg = SparseVoConfig(fast_threshold=0.01)
        pts = detect_features(img, cfg)
        desc, kept = describe_features(img, pts)
        assert len(desc) > 20
        matches = match_descriptors(desc, desc)
        assert len(matches) == len(desc)
        assert np.array_equal(matches[:, 0], matches[:, 1])

    def test_one_pixel_translation(self, rng):
        base = noise_image(rng, 96, 128)
        ref = base[:, 1:]
        cur = base[:, :-1]  # content appears shifted +1 in u
        cfg = SparseVoConfig(fast_threshold=0.01)
        rp = detect_features(ref, cfg)
        rd, rk = describe_features(ref, rp)
        cp = detect_features(cur, cfg)
        cd, ck = describe_features(cur, cp)
        matches = match_descriptors(rd, cd)
        assert len(matches) > 10
        du = cp[ck][matches[:, 1], 0] - rp[rk][matches[:, 0], 0]
        dv = cp[ck][matches[:, 1], 1] - rp[rk][matches[:, 0], 1]
        assert ((du == 1) & (dv == 0)).mean() >= 0.8

    def test_independent_noise_rejected(self, rng):
        a = noise_image(rng)
        b = noise_image(rng)
        cfg = SparseVoConfig(fast_threshold=0.01)
        pa = detect_features(a, cfg)
        da, _ = describe_features(a, pa)
        pb = detect_features(b, cfg)
        db, _ = describe_features(b, pb)
        matches = match_descriptors(da, db)
        assert len(matches) <= 0.05 * min(len(da), len(db)) + 1


class TestGate:
    def test_below(self):
        assert gate(FeatureTrack(Feature(1, 1, 1.0), (1, 1), 0.3), 0.5)

    def test_above(self):
        assert not gate(FeatureTrack(Feature(1, 1, 1.0), (1, 1), 0.7), 0.5)

    def test_boundary_strict(self):
        assert not gate(FeatureTrack(Feature(1, 1, 1.0), (1, 1), 0.5), 0.5)


def synth_tracks(cam, rng, xi_true, n=60, eph=0.0, mover_shift=None, noise=0.0):
    """Forward-synthesis oracle: project random scene points through a known
    relative pose; optionally displace the underlying points (a mover)."""
    tracks = []
    while len(tracks) < n:
        p = np.array(
            [rng.uniform(-6, 6), rng.uniform(-2, 2), rng.uniform(4, 20)]
        )
        res = project(cam, p)
        if res is None:
            continue
        u, v, d = res
        p_moved = p if mover_shift is None else p + mover_shift
        res_cur = project(cam, xi_true.transform(p_moved))
        if res_cur is None:
            continue
        cu = res_cur[0] + (rng.normal(0, noise) if noise else 0.0)
        cv = res_cur[1] + (rng.normal(0, noise) if noise else 0.0)
        tracks.append(FeatureTrack(Feature(u, v, d), (cu, cv), eph))
    return tracks


class TestSolvePose:
    def test_identity_motion(self, cam, rng):
        tracks = synth_tracks(cam, rng, Pose.identity())
        xi, stats = solve_pose(tracks, cam, SparseVoConfig())
        assert np.linalg.norm(se3_log(xi)) < 1e-8
        assert stats.gated_count == len(tracks)

    def test_recovers_known_pose(self, cam, rng):
        for _ in range(5):
            xi_true = se3_exp(
                np.concatenate([rng.uniform(-0.3, 0.3, 3), rng.uniform(-0.03, 0.03, 3)])
            )
            tracks = synth_tracks(cam, rng, xi_true)
            xi, _ = solve_pose(tracks, cam, SparseVoConfig())
            err = np.linalg.norm(se3_log(xi.inverse().compose(xi_true)))
            assert err < 1e-6

    def test_two_motion_scene_gating(self, cam, rng):
        xi_true = se3_exp([0.0, 0.0, -0.4, 0.0, 0.01, 0.0])
        static = synth_tracks(cam, rng, xi_true, n=30, eph=0.0)
        mover = synth_tracks(cam, rng, xi_true, n=70, eph=1.0, mover_shift=np.array([0.8, 0.0, 0.0]))
        tracks = static + mover
        xi, stats = solve_pose(tracks, cam, SparseVoConfig())
        assert stats.gated_count == 30
        err = np.linalg.norm(se3_log(xi.inverse().compose(xi_true)))
        assert err < 1e-4
        xi_all, _ = solve_pose(tracks, cam, SparseVoConfig(method="unmasked"))
        err_all = np.linalg.norm(se3_log(xi_all.inverse().compose(xi_true)))
        assert err_all > 10 * err

    def test_insufficient_features(self, cam, rng):
        tracks = synth_tracks(cam, rng, Pose.identity(), n=10, eph=0.9)
        with pytest.raises(InsufficientFeaturesError):
            solve_pose(tracks, cam, SparseVoConfig(tau=0.5))

    def test_gated_tracks_do_not_change_pose_bits(self, cam, rng):
        xi_true = se3_exp([0.1, -0.05, -0.3, 0.005, -0.01, 0.002])
        base = synth_tracks(cam, rng, xi_true, n=40, noise=0.2)
        extra = synth_tracks(cam, rng, xi_true, n=25, eph=0.8, mover_shift=np.array([0.5, 0.2, 0.0]))
        xi1, _ = solve_pose(base, cam, SparseVoConfig())
        xi2, _ = solve_pose(base + extra, cam, SparseVoConfig())
        assert np.array_equal(xi1.rotation, xi2.rotation)
        assert np.array_equal(xi1.translation, xi2.translation)

    def test_jacobian_matches_finite_differences(self, cam, rng):
        for _ in range(100):
            xi = se3_exp(np.concatenate([rng.uniform(-0.5, 0.5, 3), rng.uniform(-0.1, 0.1, 3)]))
            track = synth_tracks(cam, rng, xi, n=1)
            pts_ref, meas = _track_arrays(track, cam)
            _, ok, jac = _residuals_jacobian(pts_ref, meas, cam, xi)
            if not ok[0]:
                continue
            h = 1e-6
            fd = np.zeros((2, 6))
            for j in range(6):
                delta = np.zeros(6)
                delta[j] = h
                rp, _ = _residuals_jacobian(pts_ref, meas, cam, se3_exp(delta).compose(xi), want_jacobian=False)
                rm, _ = _residuals_jacobian(pts_ref, meas, cam, se3_exp(-delta).compose(xi), want_jacobian=False)
                # residual = meas - proj, so d(proj)/d(twist) = -d(residual)
                fd[:, j] = -(rp[0] - rm[0]) / (2 * h)
            scale = max(np.abs(fd).max(), 1.0)
            assert np.max(np.abs(fd - jac[0])) / scale < 1e-4

    def test_mirror_equivariance(self, rng):
        cam = CameraModel(fx=300.0, fy=300.0, cx=319.5, cy=127.5, baseline=0.5, width=640, height=256)
        mirrored = CameraModel(
            fx=300.0, fy=300.0, cx=cam.width - 1 - cam.cx, cy=127.5, baseline=0.5, width=640, height=256
        )
        xi_true = se3_exp([0.2, 0.05, -0.3, 0.0, 0.0, 0.0])
        tracks = synth_tracks(cam, rng, xi_true, n=50)
        flipped = [
            FeatureTrack(
                Feature(cam.width - 1 - t.prev.u, t.prev.v, t.prev.d),
                (cam.width - 1 - t.curr_pixel[0], t.curr_pixel[1]),
                t.ephemerality,
            )
            for t in tracks
        ]
        xi, _ = solve_pose(tracks, cam, SparseVoConfig())
        xi_f, _ = solve_pose(flipped, mirrored, SparseVoConfig())
        assert np.isclose(xi_f.translation[0], -xi.translation[0], atol=1e-9)
        assert np.isclose(xi_f.translation[1], xi.translation[1], atol=1e-9)
        assert np.isclose(xi_f.translation[2], xi.translation[2], atol=1e-9)


class TestRansac:
    def test_clean_scene(self, cam, rng):
        xi_true = se3_exp([0.05, 0.0, -0.35, 0.002, -0.004, 0.001])
        tracks = synth_tracks(cam, rng, xi_true, n=60)
        xi, stats = solve_pose_ransac(tracks, cam, SparseVoConfig())
        assert np.linalg.norm(se3_log(xi.inverse().compose(xi_true))) < 1e-5
        assert stats.gated_count >= 55

    def test_dominant_mover_corrupts(self, cam, rng):
        xi_true = se3_exp([0.0, 0.0, -0.2, 0.0, 0.0, 0.0])
        static = synth_tracks(cam, rng, xi_true, n=20, eph=0.0)
        mover = synth_tracks(cam, rng, xi_true, n=80, eph=1.0, mover_shift=np.array([0.9, 0.0, 0.0]))
        tracks = static + mover
        xi_ransac, _ = solve_pose_ransac(tracks, cam, SparseVoConfig())
        err_ransac = np.linalg.norm(se3_log(xi_ransac.inverse().compose(xi_true)))
        xi_gated, _ = solve_pose(tracks, cam, SparseVoConfig())
        err_gated = np.linalg.norm(se3_log(xi_gated.inverse().compose(xi_true)))
        assert err_ransac > 0.3  # latched onto the mover consensus
        assert err_gated < 1e-4

    def test_deterministic(self, cam, rng):
        xi_true = se3_exp([0.1, 0.0, -0.3, 0.0, 0.0, 0.0])
        tracks = synth_tracks(cam, rng, xi_true, n=50, noise=0.3)
        xi1, _ = solve_pose_ransac(tracks, cam, SparseVoConfig(seed=3))
        xi2, _ = solve_pose_ransac(tracks, cam, SparseVoConfig(seed=3))
        assert np.array_equal(xi1.matrix(), xi2.matrix())


class TestRunSequence:
    def test_stationary_camera(self):
        from ephemvo import sim
        from ephemvo.masks import SimOracleProvider
        from ephemvo.vo_sparse import run_sequence

        scene = sim.scenario_straight_line(seed=3, speed=0.0, duration=0.4)
        source = SimOracleProvider(scene)
        traj, diags = run_sequence(source, source, scene.camera, SparseVoConfig())
        assert len(traj) == scene.frame_count()
        for pose in traj.poses:
            assert np.linalg.norm(se3_log(pose)) < 1e-6
        assert not any(d.fallback for d in diags)

    def test_straight_line_speed(self):
        from ephemvo import sim
        from ephemvo.masks import SimOracleProvider
        from ephemvo.vo_sparse import run_sequence

        scene = sim.scenario_straight_line(seed=3, speed=10.0, duration=2.0)
        source = SimOracleProvider(scene)
        traj, diags = run_sequence(source, source, scene.camera, SparseVoConfig())
        positions = traj.positions()
        dt = np.diff(traj.timestamps_ns) / 1e9
        speeds = np.linalg.norm(np.diff(positions, axis=0), axis=1) / dt
        assert not any(d.fallback for d in diags)
        assert np.all(np.abs(speeds - 10.0) / 10.0 < 0.02)
