import numpy as np
import pytest

from densevio import dba, flowsim, liegeom as lg


def make_scene(flow_sigma=0.0, dynamic_fraction=0.0, width=64, height=48,
               kind="circle", surface=None, **kw):
    f = 0.9375 * width  # keep the field of view fixed across image sizes
    K = lg.Intrinsics(fx=f, fy=f, cx=width / 2, cy=height / 2,
                      width=width, height=height)
    traj = flowsim.TRAJECTORY_KINDS[kind](**kw)
    noise = flowsim.NoiseConfig(flow_sigma=flow_sigma,
                                dynamic_fraction=dynamic_fraction)
    return flowsim.SyntheticScene(
        trajectory=traj, intrinsics=K,
        cam_from_body=flowsim.default_cam_from_body(np.deg2rad(40.0)),
        surface=surface or flowsim.HeightField(), noise=noise)


class TestSceneGeometry:
    def test_gt_depth_hits_plane(self):
        scene = make_scene()
        lam, hit = scene.gt_inverse_depth(0.0)
        assert hit.sum() > 0.8 * len(lam)
        # ray-cast points must actually lie on the plane z=0
        K = scene.intrinsics
        grid = lg.PixelGrid.from_intrinsics(K)
        T_wc = scene.camera_pose(0.0).inverse()
        rays = np.stack([(grid.coords[:, 0] - K.cx) / K.fx,
                         (grid.coords[:, 1] - K.cy) / K.fy,
                         np.ones(grid.n)], axis=1)
        pts = T_wc.apply(rays / lam[:, None])
        np.testing.assert_allclose(pts[hit, 2], 0.0, atol=1e-9)

    def test_gt_depth_hits_sinusoid(self):
        scene = make_scene(surface=flowsim.HeightField(amplitude=0.2, kx=0.7, ky=0.9))
        lam, hit = scene.gt_inverse_depth(1.0)
        K = scene.intrinsics
        grid = lg.PixelGrid.from_intrinsics(K)
        T_wc = scene.camera_pose(1.0).inverse()
        rays = np.stack([(grid.coords[:, 0] - K.cx) / K.fx,
                         (grid.coords[:, 1] - K.cy) / K.fy,
                         np.ones(grid.n)], axis=1)
        pts = T_wc.apply(rays / lam[:, None])
        zs = scene.surface.height(pts[hit, 0], pts[hit, 1])
        np.testing.assert_allclose(pts[hit, 2], zs, atol=1e-9)

    def test_trajectory_derivatives_are_consistent(self):
        h = 1e-6
        for kind, kw in [("circle", {}), ("figure8", {}),
                         ("straight", {"weave_amplitude": 1.0})]:
            traj = flowsim.TRAJECTORY_KINDS[kind](**kw)
            for t in [0.3, 2.7, 11.0]:
                v_fd = (traj.position(t + h) - traj.position(t - h)) / (2 * h)
                np.testing.assert_allclose(traj.velocity(t), v_fd, atol=1e-6)
                a_fd = (traj.velocity(t + h) - traj.velocity(t - h)) / (2 * h)
                np.testing.assert_allclose(traj.acceleration(t), a_fd, atol=1e-5)
                y_fd = (traj.yaw(t + h) - traj.yaw(t - h)) / (2 * h)
                np.testing.assert_allclose(traj.yaw_rate(t), y_fd, atol=1e-5)


class TestSyntheticFlow:
    def test_noise_free_equals_reprojection(self):
        scene = make_scene()
        t_i, t_j = 1.0, 1.4
        m = flowsim.synthetic_flow((0, 1), t_i, t_j, scene, seed=7)
        lam, hit = scene.gt_inverse_depth(t_i)
        grid = lg.PixelGrid.from_intrinsics(scene.intrinsics)
        flow, valid = lg.reproject(grid, lam, scene.camera_pose(t_i),
                                   scene.camera_pose(t_j), scene.intrinsics)
        valid = valid & hit
        np.testing.assert_array_equal(m.valid_mask, valid)
        np.testing.assert_array_equal(m.target_flow[valid], flow[valid])

    def test_noise_statistics(self):
        # enough pixels for a tight empirical std: 1024x768 -> 12288 grid points
        scene = make_scene(flow_sigma=0.5, width=1024, height=768)
        m = flowsim.synthetic_flow((0, 1), 1.0, 1.05, scene, seed=3)
        lam, hit = scene.gt_inverse_depth(1.0)
        grid = lg.PixelGrid.from_intrinsics(scene.intrinsics)
        flow, valid = lg.reproject(grid, lam, scene.camera_pose(1.0),
                                   scene.camera_pose(1.05), scene.intrinsics)
        valid = valid & hit
        assert valid.sum() > 10000
        resid = (m.target_flow - flow)[valid].ravel()
        assert 0.45 <= resid.std() <= 0.55

    def test_dynamic_pixel_count(self):
        scene = make_scene(dynamic_fraction=0.1)
        m = flowsim.synthetic_flow((0, 1), 1.0, 1.1, scene, seed=5)
        n = len(m.valid_mask)
        n_dyn = int(np.floor(0.1 * n))
        assert m.valid_mask.sum() > n_dyn
        low = (m.weight[:, 0] < 1e-6) & m.valid_mask
        assert int(low.sum()) == n_dyn

    def test_per_edge_streams_are_reproducible(self):
        scene = make_scene(flow_sigma=0.5)
        a = flowsim.synthetic_flow((3, 4), 1.0, 1.2, scene, seed=9)
        b = flowsim.synthetic_flow((3, 4), 1.0, 1.2, scene, seed=9)
        c = flowsim.synthetic_flow((3, 5), 1.0, 1.2, scene, seed=9)
        np.testing.assert_array_equal(a.target_flow, b.target_flow)
        assert np.any(a.target_flow != c.target_flow)

    def test_noise_free_is_pipeline_fixed_point(self):
        # exact states + exact target -> zero linearization residual
        scene = make_scene()
        t_i, t_j = 0.5, 0.9
        m = flowsim.synthetic_flow((0, 1), t_i, t_j, scene, seed=1)
        depth = scene.gt_depth_map(0, t_i)
        e = dba.linearize_edge(m, scene.camera_pose(t_i), scene.camera_pose(t_j),
                               depth, scene.intrinsics)
        np.testing.assert_allclose(e.v_ii, 0.0, atol=1e-10)
        np.testing.assert_allclose(e.z_ii, 0.0, atol=1e-10)


class TestMeanDisparity:
    def test_identity_pose_is_zero(self):
        scene = make_scene()
        lam, _ = scene.gt_inverse_depth(0.0)
        T = scene.camera_pose(0.0)
        depths = {0: dba.DepthMap(0, lam), 1: dba.DepthMap(1, lam)}
        d = flowsim.mean_disparity(0, 1, {0: T, 1: T.copy()}, depths,
                                   scene.intrinsics)
        assert d == pytest.approx(0.0, abs=1e-12)

    def test_pure_translation_closed_form(self):
        K = lg.Intrinsics(fx=100.0, fy=100.0, cx=40.0, cy=40.0, width=80, height=80)
        lam = 0.25
        t = 0.3
        depths = {0: dba.DepthMap(0, np.full(100, lam))}
        poses = {0: lg.Transform.identity(), 1: lg.se3_exp([-t, 0, 0, 0, 0, 0])}
        d = flowsim.mean_disparity(0, 1, poses, depths, K)
        assert d == pytest.approx(K.fx * t * lam, rel=1e-9)

    def test_mostly_invalid_is_infinite(self):
        K = lg.Intrinsics(fx=100.0, fy=100.0, cx=40.0, cy=40.0, width=80, height=80)
        depths = {0: dba.DepthMap(0, np.full(100, 0.25))}
        poses = {0: lg.Transform.identity(),
                 1: lg.se3_exp([0, 0, 0, 0, np.pi, 0])}
        assert flowsim.mean_disparity(0, 1, poses, depths, K) == np.inf

    def test_invariant_to_global_rigid_transform(self):
        scene = make_scene()
        lam, _ = scene.gt_inverse_depth(0.0)
        depths = {0: dba.DepthMap(0, lam)}
        p0, p1 = scene.camera_pose(0.0), scene.camera_pose(0.4)
        d0 = flowsim.mean_disparity(0, 1, {0: p0, 1: p1}, depths, scene.intrinsics)
        G = lg.se3_exp([5.0, -2.0, 1.0, 0.4, 0.2, -0.7])
        d1 = flowsim.mean_disparity(0, 1, {0: p0.compose(G), 1: p1.compose(G)},
                                    depths, scene.intrinsics)
        assert d0 == pytest.approx(d1, abs=1e-9)


class TestSensorSynthesis:
    def test_stationary_imu_reads_gravity(self):
        # zero-speed circle is not defined; use straight with zero amplitude
        # and zero speed: the body rests level, accelerometer reads +g up
        scene = make_scene(kind="straight", speed=0.0)
        samples = scene.imu_samples(0.0, 0.1, rate=100.0)
        for s in samples:
            np.testing.assert_allclose(s.gyro, 0.0, atol=1e-12)
            np.testing.assert_allclose(s.accel, [0, 0, flowsim.GRAVITY], atol=1e-9)

    def test_wheel_speed_forward(self):
        scene = make_scene(kind="straight", speed=2.0)
        v = scene.wheel_speed(1.0, np.zeros(3))
        assert v == pytest.approx(2.0, abs=1e-12)

    def test_wheel_speed_with_lever_arm(self):
        scene = make_scene(kind="circle", radius=10.0, speed=2.0)
        lever = np.array([0.5, 0.0, 0.0])
        v = scene.wheel_speed(2.0, lever)
        # omega x lever adds yaw_rate * lever_x to the forward component
        expect = 2.0 + scene.trajectory.rate * 0.5
        assert v == pytest.approx(expect, abs=1e-12)

    def test_antenna_position(self):
        scene = make_scene(kind="straight", speed=1.0)
        lever = np.array([0.0, 0.3, 0.1])
        p = scene.antenna_position(2.0, lever)
        base = scene.trajectory.position(2.0)
        Rwb = flowsim.body_rotation(float(scene.trajectory.yaw(2.0)))
        np.testing.assert_allclose(p, base + Rwb @ lever, atol=1e-12)
