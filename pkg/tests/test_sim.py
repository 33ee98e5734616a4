import numpy as np
import pytest

from ephemvo.errors import ConfigError
from ephemvo.geometry import CameraModel, Pose
from ephemvo import sim


def small_camera():
    return CameraModel(fx=100.0, fy=100.0, cx=79.5, cy=47.5, baseline=0.5, width=160, height=96)


def empty_scene():
    return sim.SceneSpec(
        camera=small_camera(),
        static_primitives=(),
        movers=(),
        sessions=1,
        base_path=sim.LinePath((0, 0, 0), (0, 0, 1.0), duration=5.0),
        session_offsets=np.zeros((1, 3)),
        seed=7,
        duration=5.0,
    )


def plane_scene(depth=10.0):
    # fronto-parallel rectangle filling the whole view at the given depth
    prim = sim.Primitive("rect", Pose(np.eye(3), np.array([0.0, 0.0, depth])), (200.0, 200.0), 3)
    scene = empty_scene()
    scene.static_primitives = (prim,)
    return scene


class TestRenderFrame:
    def test_empty_scene(self):
        frame = sim.render_frame(empty_scene(), 0, 0.0)
        assert np.all(np.isnan(frame.depth))
        assert np.all(frame.intensity == 0.5)
        assert not frame.mover_mask.any()

    def test_fronto_parallel_plane_depth(self):
        frame = sim.render_frame(plane_scene(10.0), 0, 0.0)
        assert np.all(np.isfinite(frame.depth))
        assert np.max(np.abs(frame.depth - 10.0)) < 1e-9

    def test_plane_normals_face_camera(self):
        frame = sim.render_frame(plane_scene(10.0), 0, 0.0)
        # camera-frame normal of a wall facing the camera is -z
        assert np.allclose(frame.normals_cam[..., 2], -1.0, atol=1e-12)

    def test_deterministic(self):
        scene = sim.scenario_multi_session(seed=42, sessions=2)
        f1 = sim.render_frame(scene, 1, 1.25)
        f2 = sim.render_frame(scene, 1, 1.25)
        assert np.array_equal(f1.intensity, f2.intensity)
        assert np.array_equal(f1.depth, f2.depth, equal_nan=True)
        assert np.array_equal(f1.mover_mask, f2.mover_mask)

    def test_intensity_range_and_texture(self):
        scene = sim.scenario_multi_session(seed=1, sessions=2)
        frame = sim.render_frame(scene, 0, 1.0)
        assert frame.intensity.min() >= 0.0 and frame.intensity.max() <= 1.0
        # textured surfaces must carry gradient for the dense backend
        hit = np.isfinite(frame.depth)
        assert np.std(frame.intensity[hit]) > 0.02

    def test_timestamp_and_pose(self):
        scene = sim.scenario_straight_line(seed=0)
        frame = sim.render_frame(scene, 0, 0.5)
        assert frame.timestamp_ns == 500_000_000
        assert np.allclose(frame.camera_pose.translation, [0, 0, 5.0])
        assert np.allclose(frame.velocity, [0, 0, 10.0])


class TestLidar:
    def test_points_on_plane(self):
        scan = sim.sample_lidar(plane_scene(10.0), 0, 0.0, 1000)
        assert len(scan.points) > 0
        assert np.max(np.abs(scan.points[:, 2] - 10.0)) < 1e-9

    def test_mover_only_in_present_sessions(self):
        scene = sim.scenario_multi_session(seed=3, sessions=8)
        mover_sessions = set()
        for session in range(8):
            for k, t in enumerate(np.linspace(0, scene.duration, 20)):
                scan = sim.sample_lidar(scene, session, t, 400, scan_index=k)
                if scan.is_mover.any():
                    mover_sessions.add(session)
        expected = set()
        for mover in scene.movers:
            expected.update(mover.present_in)
        assert mover_sessions == expected

    def test_depth_image_agrees_with_lidar_ray(self):
        scene = sim.scenario_multi_session(seed=5, sessions=2)
        t = 2.0
        frame = sim.render_frame(scene, 0, t)
        cam = scene.camera
        pose = frame.camera_pose
        for (v, u) in [(10, 20), (48, 80), (90, 150), (60, 300)]:
            if not np.isfinite(frame.depth[v, u]):
                continue
            dir_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
            dir_world = pose.rotation @ dir_cam
            t_hit, _, _, _ = sim.cast_rays(scene, 0, t, pose.translation, dir_world[None, :])
            assert np.isfinite(t_hit[0])
            assert abs(t_hit[0] - frame.depth[v, u]) < 1e-9

    def test_deterministic(self):
        scene = sim.scenario_multi_session(seed=9, sessions=2)
        s1 = sim.sample_lidar(scene, 1, 3.0, 500, scan_index=4)
        s2 = sim.sample_lidar(scene, 1, 3.0, 500, scan_index=4)
        assert np.array_equal(s1.points, s2.points)

    def test_gather_cloud_shapes(self):
        scene = sim.scenario_multi_session(seed=2, sessions=3)
        pos, ses, mov = sim.gather_cloud(scene, scans_per_session=5, rays_per_scan=200)
        assert pos.shape[1] == 3
        assert len(pos) == len(ses) == len(mov)
        assert set(np.unique(ses)) <= {0, 1, 2}


class TestBusPass:
    def test_peak_coverage(self):
        scene = sim.scenario_bus_pass(0.9, seed=11)
        t_peak = scene.duration / 2.0
        coverages = []
        for dt in np.linspace(-0.3, 0.3, 7):
            frame = sim.render_frame(scene, 0, t_peak + dt)
            coverages.append(frame.mover_mask.mean())
        peak = max(coverages)
        assert 0.88 <= peak <= 0.92

    def test_lower_fraction(self):
        scene = sim.scenario_bus_pass(0.5, seed=11)
        frame = sim.render_frame(scene, 0, scene.duration / 2.0)
        assert 0.48 <= frame.mover_mask.mean() <= 0.52

    def test_invalid_fraction_rejected(self):
        with pytest.raises(ConfigError):
            sim.scenario_bus_pass(0.0)
        with pytest.raises(ConfigError):
            sim.scenario_bus_pass(1.0)

    def test_ground_truth_velocity_is_path_derivative(self):
        scene = sim.scenario_bus_pass(0.9, seed=1)
        t = 4.0
        eps = 1e-6
        numeric = (
            scene.base_path.pose(t + eps).translation - scene.base_path.pose(t - eps).translation
        ) / (2 * eps)
        assert np.allclose(scene.base_path.velocity(t), numeric, atol=1e-6)
        assert np.isclose(np.linalg.norm(scene.base_path.velocity(t)), 1.8)


class TestScenarioMultiSession:
    def test_session_jitter_is_lateral(self):
        scene = sim.scenario_multi_session(seed=0, sessions=8)
        assert scene.session_offsets.shape == (8, 3)
        assert np.all(scene.session_offsets[:, 1:] == 0.0)
        assert np.std(scene.session_offsets[:, 0]) > 0.01

    def test_movers_in_at_most_two_sessions(self):
        scene = sim.scenario_multi_session(seed=0, sessions=8)
        assert len(scene.movers) >= 2
        for mover in scene.movers:
            assert 1 <= len(mover.present_in) <= 2

    def test_rejects_single_session(self):
        with pytest.raises(ConfigError):
            sim.scenario_multi_session(seed=0, sessions=1)
