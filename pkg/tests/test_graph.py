import numpy as np
import pytest

from densevio import dba, flowsim, graph, imu
from densevio import liegeom as lg
from densevio.errors import (DanglingFactor, IndexOutOfWindow, NotAligned,
                             SingularSystem)

G_UP = np.array([0.0, 0.0, imu.GRAVITY])


def make_params(cam_from_body=None):
    return graph.FixedParams(
        cam_from_body=cam_from_body or flowsim.default_cam_from_body(),
        gravity=G_UP,
        lever_gnss=np.array([0.1, -0.2, 0.5]),
        lever_wheel=np.array([0.0, 0.8, -0.3]))


def nav_state(rng=None, scale=1.0):
    if rng is None:
        return imu.NavState(lg.Transform.identity(), np.zeros(3),
                            np.zeros(3), np.zeros(3))
    return imu.NavState(lg.se3_exp(scale * rng.normal(size=6)),
                        rng.normal(size=3),
                        0.05 * rng.normal(size=3),
                        0.02 * rng.normal(size=3))


class TestVisualFactorTransform:
    def random_constraint(self, rng, n_poses=2):
        A = rng.normal(size=(6 * n_poses + 4, 6 * n_poses))
        H = A.T @ A
        v = rng.normal(size=6 * n_poses)
        return dba.VisualConstraint(tuple(range(n_poses)), H, v)

    def test_identity_extrinsics(self):
        rng = np.random.default_rng(50)
        vc = self.random_constraint(rng)
        params = make_params(cam_from_body=lg.Transform.identity())
        g = graph.FactorGraph(params)
        g.add_state(0, nav_state())
        g.add_state(1, nav_state())
        f = g.add_visual_factor(vc)
        for a in range(2):
            for b in range(2):
                np.testing.assert_allclose(
                    f.H[15 * a:15 * a + 6, 15 * b:15 * b + 6],
                    vc.H[6 * a:6 * a + 6, 6 * b:6 * b + 6], atol=1e-12)
            np.testing.assert_allclose(f.v[15 * a:15 * a + 6],
                                       -vc.v[6 * a:6 * a + 6], atol=1e-12)

    def test_congruence_preserves_symmetry_and_psd(self):
        rng = np.random.default_rng(51)
        params = make_params()
        for _ in range(20):
            vc = self.random_constraint(rng)
            g = graph.FactorGraph(params)
            g.add_state(0, nav_state())
            g.add_state(1, nav_state())
            f = g.add_visual_factor(vc)
            np.testing.assert_allclose(f.H, f.H.T, atol=1e-10)
            assert np.linalg.eigvalsh(f.H).min() > -1e-9

    def test_two_path_energy_equivalence(self):
        # energy of the transformed factor at body tangents equals the
        # camera-side energy at xi_c = -Adj(T^c_b) xi_b
        rng = np.random.default_rng(52)
        params = make_params()
        M = -lg.adjoint(params.cam_from_body)
        for _ in range(50):
            vc = self.random_constraint(rng)
            g = graph.FactorGraph(params)
            s0, s1 = nav_state(rng, 0.5), nav_state(rng, 0.5)
            g.add_state(0, s0)
            g.add_state(1, s1)
            f = g.add_visual_factor(vc)
            xb = 1e-3 * rng.normal(size=12)
            xc = np.concatenate([M @ xb[:6], M @ xb[6:]])
            e_cam = 0.5 * xc @ vc.H @ xc - xc @ vc.v
            d0 = np.zeros(15); d0[:6] = xb[:6]
            d1 = np.zeros(15); d1[:6] = xb[6:]
            trial = {0: graph.state_boxplus(g.states[0], d0),
                     1: graph.state_boxplus(g.states[1], d1)}
            assert abs(f.cost(trial) - e_cam) < 1e-10


class TestSensorFactors:
    def test_gnss_zero_residual_at_antenna(self):
        params = make_params()
        g = graph.FactorGraph(params)
        rng = np.random.default_rng(53)
        x = nav_state(rng, 0.5)
        g.add_state(0, x)
        T_nw = lg.se3_exp([1.0, 2.0, -0.5, 0, 0, 0.8])
        g.set_alignment(T_nw)
        p_ant = T_nw.apply(x.pose.t + x.pose.rotation_matrix() @ params.lever_gnss)
        f = g.add_gnss_factor(0, p_ant, sigma=0.1)
        r, _ = f.residual(g.states)
        np.testing.assert_allclose(r, 0.0, atol=1e-12)

    def test_gnss_requires_alignment(self):
        g = graph.FactorGraph(make_params())
        g.add_state(0, nav_state())
        with pytest.raises(NotAligned):
            g.add_gnss_factor(0, np.zeros(3), sigma=0.1)

    def test_wheel_pure_forward(self):
        params = make_params()
        params.lever_wheel = np.zeros(3)
        g = graph.FactorGraph(params)
        x = imu.NavState(lg.Transform.identity(), np.array([0.0, 2.0, 0.0]),
                         np.zeros(3), np.zeros(3))
        g.add_state(0, x)
        f = g.add_wheel_factor(0, speed=1.5, gyro=np.zeros(3), sigma=0.05)
        r, _ = f.residual(g.states)
        assert r[0] == pytest.approx(2.0 - 1.5, abs=1e-12)

    def test_factor_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(54)
        params = make_params()
        g = graph.FactorGraph(params)
        g.set_alignment(lg.se3_exp([0.5, -1.0, 0.2, 0, 0, 0.4]))
        x = nav_state(rng, 0.5)
        g.add_state(0, x)
        fg = g.add_gnss_factor(0, rng.normal(size=3), sigma=0.1)
        fw = g.add_wheel_factor(0, speed=0.7, gyro=rng.normal(size=3) * 0.2,
                                sigma=0.05)
        h = 1e-6
        for f in (fg, fw):
            r0, J = f.residual(g.states)
            for col in range(15):
                d = np.zeros(15)
                d[col] = h
                rp, _ = f.residual({0: graph.state_boxplus(x, d)})
                rm, _ = f.residual({0: graph.state_boxplus(x, -d)})
                fd = (rp - rm) / (2 * h)
                np.testing.assert_allclose(J[:, col], fd, rtol=1e-5, atol=1e-8)


class TestOptimize:
    def anchored_graph(self):
        g = graph.FactorGraph(make_params())
        g.add_state(0, nav_state())
        g.add_prior(0, pose_sigma=0.01, vel_sigma=0.01,
                    bias_accel_sigma=0.01, bias_gyro_sigma=0.01)
        return g

    def test_zero_residual_start(self):
        g = self.anchored_graph()
        report = g.optimize()
        assert report.converged
        assert report.iterations == 1
        assert report.applied_steps == 0

    def test_quadratic_only_single_step(self):
        # linear problem: quadratic factor on additive components only
        g = self.anchored_graph()
        rng = np.random.default_rng(55)
        A = rng.normal(size=(12, 9))
        H9 = A.T @ A + np.eye(9)
        v9 = 0.1 * rng.normal(size=9)  # target inside the bias saturation
        H = np.zeros((15, 15))
        H[:6, :6] = np.eye(6)              # pose pinned at snapshot, no pull
        H[6:, 6:] = H9
        v = np.zeros(15)
        v[6:] = v9
        f = graph.QuadraticFactor((0,), H, v, [g.states[0]])
        g.factors = [f]
        report = g.optimize()
        assert report.converged
        assert report.applied_steps == 1
        expect = np.linalg.solve(H9, v9)
        got = np.concatenate([g.states[0].velocity, g.states[0].bias_accel,
                              g.states[0].bias_gyro])
        np.testing.assert_allclose(got, expect, atol=1e-10)

    def test_unanchored_graph_is_singular(self):
        g = graph.FactorGraph(make_params())
        scene = make_scene()
        g.add_state(0, nav_state())
        g.add_state(1, nav_state())
        batch = scene.imu_samples(0.0, 0.2)
        pre = imu.preintegrate(batch, np.zeros(3), np.zeros(3))
        g.add_imu_factor(0, 1, pre)
        with pytest.raises(SingularSystem):
            g.optimize()

    def test_cost_non_increasing(self):
        rng = np.random.default_rng(56)
        g, gt = vio_window_graph(rng, n_kf=4, perturb=True)
        for _ in range(3):
            report = g.optimize(max_iters=4)
            assert all(b <= a * (1 + 1e-9) + 1e-12
                       for a, b in zip(report.costs, report.costs[1:]))


def make_scene():
    K = lg.Intrinsics(fx=60.0, fy=60.0, cx=32.0, cy=24.0, width=64, height=48)
    return flowsim.SyntheticScene(
        trajectory=flowsim.CircleTrajectory(radius=8.0, speed=2.0),
        intrinsics=K, cam_from_body=flowsim.default_cam_from_body())


def scene_state(scene, t):
    Rwb = flowsim.body_rotation(float(scene.trajectory.yaw(t)))
    return imu.NavState(
        lg.Transform.from_rotation_translation(Rwb, scene.trajectory.position(t)),
        scene.trajectory.velocity(t), np.zeros(3), np.zeros(3))


def vio_window_graph(rng, n_kf=5, dt_kf=0.25, perturb=False):
    """Noise-free window: exact flows, exact IMU, prior on the first state."""
    scene = make_scene()
    params = graph.FixedParams(cam_from_body=scene.cam_from_body, gravity=G_UP)
    g = graph.FactorGraph(params, max_window=n_kf)
    times = {k: k * dt_kf for k in range(n_kf)}
    gt = {k: scene_state(scene, times[k]) for k in range(n_kf)}
    for k in range(n_kf):
        s = gt[k].copy()
        if perturb and k > 0:
            d = np.concatenate([0.01 * rng.normal(size=3),
                                np.deg2rad(0.2) * rng.normal(size=3),
                                0.05 * rng.normal(size=3), np.zeros(6)])
            s = graph.state_boxplus(s, d)
        g.add_state(k, s)
    g.add_prior(0, pose_sigma=1e-4, vel_sigma=1e-4,
                bias_accel_sigma=1e-3, bias_gyro_sigma=1e-4)
    for k in range(n_kf - 1):
        batch = scene.imu_samples(times[k], times[k + 1], rate=1000.0)
        g.add_imu_factor(k, k + 1, imu.preintegrate(batch, np.zeros(3),
                                                    np.zeros(3)))
    # measurements and ground-truth depths for the visual constraint
    meas = []
    depths = {}
    for i in range(n_kf):
        depths[i] = scene.gt_depth_map(i, times[i])
        for j in range(n_kf):
            if i != j and abs(i - j) <= 2:
                meas.append(flowsim.synthetic_flow((i, j), times[i], times[j],
                                                   scene, seed=0))
    g._test_ctx = (scene, times, meas, depths)
    return g, gt


def rebuild_visual(g):
    scene, times, meas, depths = g._test_ctx
    g.drop_transient_factors()
    cam_poses = {k: scene.cam_from_body.compose(g.states[k].pose.inverse())
                 for k in g.order}
    constraints = []
    for a in sorted({m.source for m in meas}):
        blocks = [dba.linearize_edge(m, cam_poses[m.source], cam_poses[m.target],
                                     depths[m.source], scene.intrinsics)
                  for m in meas if m.source == a]
        constraints.append(
            dba.schur_eliminate_depth(dba.assemble_frame_system(a, blocks)))
    vc = dba.accumulate_visual_constraint(constraints, tuple(g.order))
    g.add_visual_factor(vc)


class TestVioWindow:
    def test_noise_free_recovers_ground_truth(self):
        rng = np.random.default_rng(57)
        g, gt = vio_window_graph(rng, perturb=True)
        for _ in range(6):   # hierarchical iterations: relinearize visual factor
            rebuild_visual(g)
            g.optimize(max_iters=2)
        for k in g.order:
            dp = np.linalg.norm(g.states[k].pose.t - gt[k].pose.t)
            dr = np.linalg.norm(lg.so3_log_matrix(
                g.states[k].pose.rotation_matrix().T
                @ gt[k].pose.rotation_matrix()))
            assert dp < 1e-4, f"kf {k} position error {dp}"
            assert dr < 1e-5, f"kf {k} rotation error {dr}"


class TestMarginalize:
    def test_prior_only_discards_information(self):
        g = graph.FactorGraph(make_params())
        g.add_state(0, nav_state())
        g.add_prior(0, 0.1, 0.1, 0.1, 0.1)
        g.marginalize(0)
        assert g.prior() is None
        assert 0 not in g.states and not g.factors

    def test_linear_chain_matches_batch(self):
        # quadratic factors on additive components only: marginalization must
        # be information-lossless, windowed mean == batch mean
        rng = np.random.default_rng(58)

        def build(n=3):
            g = graph.FactorGraph(make_params(), max_window=n)
            for k in range(n):
                g.add_state(k, nav_state())
            g.add_prior(0, 1e-3, 0.5, 0.5, 0.5)
            for k in range(n - 1):
                A = rng.normal(size=(20, 18))
                H18 = A.T @ A + 0.1 * np.eye(18)
                v18 = rng.normal(size=18)
                H = np.zeros((30, 30))
                v = np.zeros(30)
                idx = np.concatenate([np.arange(6, 15), np.arange(21, 30)])
                H[np.ix_(idx, idx)] = H18
                H[:6, :6] = np.eye(6)
                H[15:21, 15:21] = np.eye(6)
                v[idx] = v18
                g.factors.append(graph.QuadraticFactor(
                    (k, k + 1), H, v, [g.states[k], g.states[k + 1]]))
            return g

        rng_state = rng.bit_generator.state
        batch = build()
        batch.optimize(max_iters=5)

        rng.bit_generator.state = rng_state
        windowed = build()
        windowed.marginalize(0)
        windowed.optimize(max_iters=5)
        for k in (1, 2):
            np.testing.assert_allclose(windowed.states[k].velocity,
                                       batch.states[k].velocity, atol=1e-10)
            np.testing.assert_allclose(windowed.states[k].bias_gyro,
                                       batch.states[k].bias_gyro, atol=1e-10)

    def test_nonlinear_windowed_close_to_batch(self):
        # IMU + GNSS chain, window of 4 vs full batch over 8 epochs
        rng = np.random.default_rng(59)
        scene = make_scene()
        params = graph.FixedParams(cam_from_body=scene.cam_from_body,
                                   gravity=G_UP)
        times = [0.3 * k for k in range(8)]
        T_nw = lg.Transform.identity()

        def gnss_meas(t):
            return scene.antenna_position(t, params.lever_gnss) \
                + 0.02 * rng.normal(size=3)

        fixes = [gnss_meas(t) for t in times]
        pres = [imu.preintegrate(scene.imu_samples(times[k], times[k + 1],
                                                   rate=200.0),
                                 np.zeros(3), np.zeros(3))
                for k in range(7)]

        batch = graph.FactorGraph(params, max_window=8)
        batch.set_alignment(T_nw)
        for k, t in enumerate(times):
            batch.add_state(k, scene_state(scene, t))
        batch.add_prior(0, 1e-3, 1e-2, 1e-2, 1e-3)
        for k in range(7):
            batch.add_imu_factor(k, k + 1, pres[k])
        for k in range(8):
            batch.add_gnss_factor(k, fixes[k], sigma=0.05)
        batch.optimize(max_iters=10)

        win = graph.FactorGraph(params, max_window=4)
        win.set_alignment(T_nw)
        for k in range(8):
            win.add_state(k, scene_state(scene, times[k]))
            if k == 0:
                win.add_prior(0, 1e-3, 1e-2, 1e-2, 1e-3)
            else:
                win.add_imu_factor(k - 1, k, pres[k - 1])
            win.add_gnss_factor(k, fixes[k], sigma=0.05)
            win.optimize(max_iters=5)
            if len(win.order) == 4 and k < 7:
                win.marginalize(win.order[0])
        for k in win.order:
            err = np.linalg.norm(win.states[k].pose.t - batch.states[k].pose.t)
            assert err < 1e-2, f"epoch {k}: window vs batch {err}"

    def test_no_factor_references_removed_state(self):
        rng = np.random.default_rng(60)
        g, _ = vio_window_graph(rng)
        g.marginalize(0)
        assert all(0 not in f.ids for f in g.factors)
        assert 0 not in g.states

    def test_transient_visual_blocks_marginalization(self):
        rng = np.random.default_rng(61)
        g, _ = vio_window_graph(rng)
        rebuild_visual(g)
        with pytest.raises(DanglingFactor):
            g.marginalize(0)

    def test_information_stays_symmetric_psd(self):
        rng = np.random.default_rng(62)
        g, _ = vio_window_graph(rng)
        for _ in range(3):
            oldest = g.order[0]
            g.marginalize(oldest)
            prior = g.prior()
            if prior is None:
                continue
            np.testing.assert_allclose(prior.H, prior.H.T, atol=1e-9)
            assert np.linalg.eigvalsh(prior.H).min() > -1e-9


class TestWindowBookkeeping:
    def test_window_capacity(self):
        g = graph.FactorGraph(make_params(), max_window=2)
        g.add_state(0, nav_state())
        g.add_state(1, nav_state())
        with pytest.raises(IndexOutOfWindow):
            g.add_state(2, nav_state())

    def test_drop_state_removes_factors(self):
        g = graph.FactorGraph(make_params())
        scene = make_scene()
        g.add_state(0, nav_state())
        g.add_state(1, nav_state())
        pre = imu.preintegrate(scene.imu_samples(0.0, 0.2), np.zeros(3),
                               np.zeros(3))
        g.add_imu_factor(0, 1, pre)
        g.drop_state(1)
        assert g.factors == [] and list(g.states) == [0]

    def test_factor_outside_window_rejected(self):
        g = graph.FactorGraph(make_params())
        g.add_state(0, nav_state())
        scene = make_scene()
        pre = imu.preintegrate(scene.imu_samples(0.0, 0.2), np.zeros(3),
                               np.zeros(3))
        with pytest.raises(IndexOutOfWindow):
            g.add_imu_factor(0, 1, pre)
