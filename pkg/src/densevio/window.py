"""Epoch pipeline: keyframe selection, edge lifecycle, initialization, alignment.

One epoch = one incoming frame.  The newest frame always joins the window
provisionally; after the update rounds the disparity of the incoming image
decides whether the second-newest frame is promoted to a keyframe (followed
by one more update round and marginalization of the oldest keyframe when the
window is full) or abandoned.  The graph is therefore sized one slot above
the configured window so the provisional frame fits during an epoch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import dba
from .dba import DepthMap
from .errors import (DegenerateGeometry, InsufficientExcitation,
                     NotInitialized)
from .flowsim import FlowProvider, mean_disparity, measurement_disparity
from .graph import FactorGraph, FixedParams
from .imu import (GRAVITY, ImuSample, NavState, NoiseModel, predict_state,
                  preintegrate)
from .liegeom import (Intrinsics, PixelGrid, Transform, se3_log,
                      so3_exp_matrix, so3_log_matrix)


@dataclass
class WindowConfig:
    window_size: int = 15
    covis_range: int = 5
    midrange_offsets: tuple = (-8, -9, -10)
    max_active_edges: int = 48
    max_midrange_per_kf: int = 1
    keyframe_disparity_thresh: float = 2.5   # px at 1/8 resolution
    updates_per_epoch: int = 2
    extra_update_on_keyframe: int = 1
    inner_iterations: int = 2                # low-level GN passes per update
    edge_maturity_rounds: int = 6            # flow updates before an edge matures
    n_init: int = 8                          # keyframes buffered for initialization
    align_distance_thresh: float = 10.0      # m travelled before GNSS alignment
    max_prediction_gap: float = 1.0          # s
    gnss_sigma: float = 0.05                 # m
    wheel_sigma: float = 0.05                # m/s
    assoc_gate: float = 0.12                 # s, sensor-to-epoch association

    def __post_init__(self):
        if min(self.window_size, self.covis_range, self.max_active_edges,
               self.updates_per_epoch) <= 0:
            raise ValueError("window configuration values must be positive")


@dataclass
class EdgeRecord:
    source: int
    target: int
    created_epoch: int
    maturity: int = 6
    rounds: int = 0
    midrange: bool = False
    measurement: object = None

    @property
    def status(self):
        return "mature" if self.rounds >= self.maturity else "active"

    def retire(self):
        """Edge left the active-priority set; its flow target stays frozen."""
        self.rounds = self.maturity


@dataclass
class AlignmentState:
    status: str = "unaligned"
    nav_from_world: Transform | None = None
    distance_thresh: float = 10.0

    @property
    def aligned(self):
        return self.status == "aligned"


@dataclass
class MarginalizedKeyframe:
    frame_id: int
    t: float
    cam_pose: Transform            # world-to-camera at marginalization time
    body_pose: Transform
    depth: DepthMap
    neighbors: list                # [(cam_pose, DepthMap)] of remaining keyframes


@dataclass
class EpochReport:
    frame_id: int
    t: float
    window: tuple
    keyframe_promoted: bool = False
    dropped_frame: int | None = None
    marginalized: MarginalizedKeyframe | None = None
    disparity: float = 0.0
    n_edges: int = 0
    n_active: int = 0
    n_midrange_max_per_kf: int = 0
    alignment_event: bool = False
    timings: dict = field(default_factory=dict)
    state: NavState | None = None


def select_keyframe(disparity_lowres: float, threshold: float) -> bool:
    """Keep the frame iff mean disparity reaches the threshold (closed bound)."""
    return disparity_lowres >= threshold


def _merge_samples(a, b):
    """Concatenate sample batches, dropping duplicated boundary timestamps."""
    merged = list(a) + list(b)
    return [s for k, s in enumerate(merged) if k == 0 or s.t > merged[k - 1].t]


def gnss_align(antenna_world, fixes_nav):
    """Closed-form 4-DOF (heading + translation) track alignment.

    antenna_world: (m, 3) GNSS antenna positions predicted from the VIO
    trajectory, in the world frame.  fixes_nav: (m, 3) measured positions in
    the navigation frame.  Returns (heading, translation, nav_from_world).
    """
    a = np.asarray(antenna_world, dtype=float)
    p = np.asarray(fixes_nav, dtype=float)
    if len(a) < 2:
        raise DegenerateGeometry("need at least two associated fixes")
    ac = a - a.mean(axis=0)
    pc = p - p.mean(axis=0)
    spread = float(np.sum(ac[:, 0]**2 + ac[:, 1]**2))
    if spread < 1e-6:
        raise DegenerateGeometry("track is effectively a point")
    cross = float(np.sum(ac[:, 0] * pc[:, 1] - ac[:, 1] * pc[:, 0]))
    dot = float(np.sum(ac[:, 0] * pc[:, 0] + ac[:, 1] * pc[:, 1]))
    heading = float(np.arctan2(cross, dot))
    Rz = so3_exp_matrix([0.0, 0.0, heading])
    t = p.mean(axis=0) - Rz @ a.mean(axis=0)
    return heading, t, Transform.from_rotation_translation(Rz, t)


# ---------------------------------------------------------------------------
# Visual-inertial initialization
# ---------------------------------------------------------------------------

@dataclass
class InitResult:
    states: dict                      # frame id -> NavState (metric, gravity-aligned)
    cam_poses: dict                   # frame id -> world-to-camera Transform
    depths: dict                      # frame id -> DepthMap (metric)
    scale: float
    gravity_world: np.ndarray         # (0, 0, +9.81) after alignment
    gyro_bias: np.ndarray


def _solve_gyro_bias(cam_poses, order, segments, cam_from_body, noise):
    """Gyroscope bias from aligning preintegrated and visual rotations."""
    R_cb = cam_from_body.rotation_matrix()
    bg = np.zeros(3)
    for _ in range(3):
        A = np.zeros((3, 3))
        b = np.zeros(3)
        for k in range(len(order) - 1):
            samples = segments[k]
            pre = preintegrate(samples, np.zeros(3), bg, noise)
            R_b0 = cam_poses[order[k]].rotation_matrix().T @ R_cb
            R_b1 = cam_poses[order[k + 1]].rotation_matrix().T @ R_cb
            r = so3_log_matrix(pre.delta_R.T @ (R_b0.T @ R_b1))
            A += pre.J_R_bg.T @ pre.J_R_bg
            b += pre.J_R_bg.T @ r
        bg = bg + np.linalg.solve(A + 1e-12 * np.eye(3), b)
    return bg


def _linear_alignment(cam_poses, order, pres, cam_from_body,
                      scale_uncertainty_ratio=1e4):
    """Velocities, gravity (visual frame) and metric scale, linear solve."""
    R_cb = cam_from_body.rotation_matrix()
    t_cb = cam_from_body.t
    t_bc = -(R_cb.T @ t_cb)     # camera position in the body frame
    n = len(order)
    centers = {}
    rot_b = {}
    for fid in order:
        T = cam_poses[fid]
        R = T.rotation_matrix()
        centers[fid] = -(R.T @ T.t)
        rot_b[fid] = R.T @ R_cb          # R^{wv}_{b}

    dim = 3 * n + 4
    rows = []
    rhs = []
    for k in range(n - 1):
        i0, i1 = order[k], order[k + 1]
        pre = pres[k]
        dt = pre.dt
        R0, R1 = rot_b[i0], rot_b[i1]
        dc = centers[i1] - centers[i0]

        row_p = np.zeros((3, dim))
        row_p[:, 3 * k:3 * k + 3] = -np.eye(3) * dt
        row_p[:, 3 * n:3 * n + 3] = 0.5 * R0.T * dt * dt
        row_p[:, 3 * n + 3] = R0.T @ dc
        rhs_p = pre.delta_p + R0.T @ ((R1 - R0) @ t_bc)
        rows.append(row_p)
        rhs.append(rhs_p)

        row_v = np.zeros((3, dim))
        row_v[:, 3 * k:3 * k + 3] = -np.eye(3)
        row_v[:, 3 * (k + 1):3 * (k + 1) + 3] = R0.T @ R1
        row_v[:, 3 * n:3 * n + 3] = R0.T * dt
        rows.append(row_v)
        rhs.append(pre.delta_v)

    A = np.vstack(rows)
    b = np.concatenate(rhs)
    x, *_ = np.linalg.lstsq(A, b, rcond=None)

    # scale observability: reject when the scale column participates in a
    # direction that is orders of magnitude weaker than the best-constrained one
    _, sv, Vt = np.linalg.svd(A, full_matrices=False)
    var_s = float(np.sum(Vt[:, -1]**2 / np.maximum(sv, 1e-12 * sv[0])**2))
    if np.sqrt(var_s) * sv[0] > scale_uncertainty_ratio:
        raise InsufficientExcitation(
            "monocular scale variance above bound; motion lacks excitation")

    vels = x[:3 * n].reshape(n, 3)
    g = x[3 * n:3 * n + 3]
    s = float(x[3 * n + 3])
    if s <= 1e-4:
        raise InsufficientExcitation(f"non-positive scale estimate {s:.3g}")
    if abs(np.linalg.norm(g) - GRAVITY) > 1.0:
        raise InsufficientExcitation(
            f"gravity magnitude {np.linalg.norm(g):.2f} far from {GRAVITY}")
    return vels, g, s, (A, b)


def _refine_gravity(A_b, n, g0, iterations=4):
    """Re-solve with gravity constrained to the nominal norm (2-DOF tangent)."""
    A, b = A_b
    g = g0 / np.linalg.norm(g0) * GRAVITY
    dim = A.shape[1]
    for _ in range(iterations):
        ghat = g / np.linalg.norm(g)
        tmp = np.array([1.0, 0.0, 0.0]) if abs(ghat[0]) < 0.9 \
            else np.array([0.0, 1.0, 0.0])
        b1 = np.cross(ghat, tmp)
        b1 /= np.linalg.norm(b1)
        b2 = np.cross(ghat, b1)
        basis = np.stack([b1, b2], axis=1)

        cols = [c for c in range(dim) if c < dim - 4 or c == dim - 1]
        A2 = np.zeros((A.shape[0], len(cols) + 2))
        A2[:, :len(cols) - 1] = A[:, :dim - 4]
        A2[:, len(cols) - 1] = A[:, dim - 1]
        A2[:, len(cols):] = A[:, dim - 4:dim - 1] @ basis
        b2_rhs = b - A[:, dim - 4:dim - 1] @ g
        x, *_ = np.linalg.lstsq(A2, b2_rhs, rcond=None)
        g = g + basis @ x[-2:]
        g = g / np.linalg.norm(g) * GRAVITY
    vels = x[:3 * n].reshape(n, 3)
    s = float(x[len(cols) - 1])
    return vels, g, s


def vi_initialize(cam_poses: dict, depths: dict, order, segments,
                  cam_from_body: Transform, noise: NoiseModel,
                  measurements=None, K: Intrinsics | None = None) -> InitResult:
    """VINS-style initialization on top of visual-only DBA poses.

    order is the keyframe id sequence, segments[k] the IMU samples spanning
    (order[k], order[k+1]).  cam_poses/depths are the up-to-scale DBA output;
    they are rescaled to metric and gravity-aligned in place of a returned
    copy.  When measurements and intrinsics are given, a final DBA pass
    refines the rescaled solution.
    """
    bg = _solve_gyro_bias(cam_poses, order, segments, cam_from_body, noise)
    pres = [preintegrate(segments[k], np.zeros(3), bg, noise)
            for k in range(len(order) - 1)]
    vels_b, g_wv, s, A_b = _linear_alignment(cam_poses, order, pres,
                                             cam_from_body)
    vels_b, g_wv, s = _refine_gravity(A_b, len(order), g_wv)
    if s <= 1e-4:
        raise InsufficientExcitation(f"non-positive refined scale {s:.3g}")

    # rotate the visual world so gravity is +z (up), remove the free yaw
    ghat = g_wv / np.linalg.norm(g_wv)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(ghat, z)
    sin = np.linalg.norm(axis)
    cos = float(ghat @ z)
    if sin < 1e-12:
        R0 = np.eye(3) if cos > 0 else so3_exp_matrix([np.pi, 0.0, 0.0])
    else:
        R0 = so3_exp_matrix(axis / sin * np.arctan2(sin, cos))
    yaw = np.arctan2(R0[1, 0], R0[0, 0])
    R0 = so3_exp_matrix([0.0, 0.0, -yaw]) @ R0

    new_cam = {}
    new_depths = {}
    states = {}
    R_cb = cam_from_body.rotation_matrix()
    for idx, fid in enumerate(order):
        T = cam_poses[fid]
        R = T.rotation_matrix()
        new_cam[fid] = Transform.from_rotation_translation(R @ R0.T, s * T.t)
        if fid in depths:
            new_depths[fid] = DepthMap(fid, depths[fid].lam / s)
        body = new_cam[fid].inverse().compose(cam_from_body)
        v_w = body.rotation_matrix() @ vels_b[idx]
        states[fid] = NavState(body, v_w, np.zeros(3), bg)

    if measurements and K is not None:
        refined, refined_depths, _ = dba.solve_visual_only(
            order, new_cam, new_depths, measurements, K, iterations=4)
        new_cam, new_depths = refined, refined_depths
        for idx, fid in enumerate(order):
            body = new_cam[fid].inverse().compose(cam_from_body)
            states[fid] = NavState(body, states[fid].velocity, np.zeros(3), bg)

    return InitResult(states, new_cam, new_depths, s,
                      np.array([0.0, 0.0, GRAVITY]), bg)


# ---------------------------------------------------------------------------
# The pipeline
# ---------------------------------------------------------------------------

class Pipeline:
    """Sequential frame-by-frame estimator driving DBA, graph and sensors."""

    def __init__(self, provider: FlowProvider, params: FixedParams,
                 K: Intrinsics, config: WindowConfig | None = None,
                 noise: NoiseModel | None = None, map_builder=None):
        self.provider = provider
        self.params = params
        self.K = K
        self.grid = PixelGrid.from_intrinsics(K)
        self.config = config or WindowConfig()
        self.noise = noise or NoiseModel()
        self.map_builder = map_builder

        # one slot of headroom for the provisional newest frame
        self.graph = FactorGraph(params, max_window=self.config.window_size + 1)
        self.depths: dict[int, DepthMap] = {}
        self.times: dict[int, float] = {}
        self.edges: list[EdgeRecord] = []
        self.segments: dict[int, list] = {}   # frame id -> samples since prev frame
        self.alignment = AlignmentState(
            distance_thresh=self.config.align_distance_thresh)
        self.gnss_queue: list = []            # (t, position_nav) awaiting alignment
        self.initialized = False
        self.init_frames: list[int] = []
        self.init_cam_poses: dict[int, Transform] = {}
        self.init_depth_guess = 0.25
        self.frame_counter = 0
        self.trajectory: list = []            # (t, NavState) newest estimate per epoch
        self.reports: list[EpochReport] = []
        self._pending_samples: list = []
        self._last_flow_updates = 0
        self.provisional: int | None = None   # frame awaiting keyframe decision

    # -- helpers -------------------------------------------------------------

    def cam_pose(self, fid) -> Transform:
        if not self.initialized:
            return self.init_cam_poses[fid]
        return self.params.cam_from_body.compose(
            self.graph.states[fid].pose.inverse())

    def cam_poses(self) -> dict:
        return {fid: self.cam_pose(fid) for fid in self._window()}

    def _window(self):
        if not self.initialized:
            return list(self.init_frames)
        return list(self.graph.order)

    def _measure(self, edge):
        return self.provider.measure(edge, self.times, self.cam_poses(),
                                     self.depths)

    def _midrange_count(self, fid):
        return sum(1 for e in self.edges if e.midrange and fid in (e.source,
                                                                   e.target))

    def _edges_exist(self, i, j):
        return any(e.source == i and e.target == j for e in self.edges)

    def _new_edge(self, i, j, midrange=False):
        self.edges.append(EdgeRecord(i, j, self.frame_counter,
                                     maturity=self.config.edge_maturity_rounds,
                                     midrange=midrange))

    # -- bootstrap -----------------------------------------------------------

    def _bootstrap_frame(self, fid, t, samples):
        self.times[fid] = t
        if not self.init_frames:
            self.init_frames.append(fid)
            self.init_cam_poses[fid] = Transform.identity()
            self.depths[fid] = DepthMap(fid, np.full(self.grid.n,
                                                     self.init_depth_guess))
            self._pending_samples = []
            return EpochReport(fid, t, tuple(self.init_frames))

        last = self.init_frames[-1]
        pending = _merge_samples(self._pending_samples, samples)
        meas = self.provider.measure((last, fid), self.times,
                                     self.init_cam_poses, self.depths)
        disp = measurement_disparity(meas, self.grid) / 8.0
        if not select_keyframe(disp, self.config.keyframe_disparity_thresh):
            self._pending_samples = pending
            del self.times[fid]
            return EpochReport(fid, t, tuple(self.init_frames), disparity=disp)

        self.init_frames.append(fid)
        self.init_cam_poses[fid] = self.init_cam_poses[last].copy()
        self.depths[fid] = DepthMap(fid, np.full(self.grid.n,
                                                 self.init_depth_guess))
        self.segments[fid] = pending
        self._pending_samples = []
        report = EpochReport(fid, t, tuple(self.init_frames),
                             keyframe_promoted=True, disparity=disp)

        if len(self.init_frames) >= 3:
            self._init_dba(iterations=6)
        if len(self.init_frames) >= self.config.n_init:
            self._finish_initialization()
            report.window = tuple(self._window())
        return report

    def _init_measurements(self):
        meas = []
        ids = self.init_frames
        for i in ids:
            for j in ids:
                if i != j and abs(ids.index(i) - ids.index(j)) <= 3:
                    meas.append(self.provider.measure(
                        (i, j), self.times, self.init_cam_poses, self.depths))
        return meas

    def _init_dba(self, iterations):
        meas = self._init_measurements()
        poses, depths, _ = dba.solve_visual_only(
            tuple(self.init_frames), self.init_cam_poses, self.depths, meas,
            self.K, iterations=iterations)
        self.init_cam_poses.update(poses)
        self.depths.update(depths)

    def _finish_initialization(self):
        self._init_dba(iterations=30)
        order = list(self.init_frames)
        segments = [self.segments[fid] for fid in order[1:]]
        meas = self._init_measurements()
        result = vi_initialize(self.init_cam_poses, self.depths, order,
                               segments, self.params.cam_from_body, self.noise,
                               measurements=meas, K=self.K)
        self.depths.update(result.depths)
        for fid in order:
            self.graph.add_state(fid, result.states[fid])
        self.graph.add_prior(order[0], pose_sigma=1e-4, vel_sigma=0.1,
                             bias_accel_sigma=0.1, bias_gyro_sigma=0.02)
        for k, fid in enumerate(order[1:]):
            pre = preintegrate(segments[k], np.zeros(3), result.gyro_bias,
                               self.noise)
            self.graph.add_imu_factor(order[k], fid, pre)
        for k in range(len(order)):
            for j in range(k + 1, min(k + 4, len(order))):
                for (a, b) in ((order[k], order[j]), (order[j], order[k])):
                    if not self._edges_exist(a, b):
                        self._new_edge(a, b)
        self.initialized = True
        self.init_cam_poses = {}
        self._update_round()
        self._update_round()

    # -- steady-state epoch ----------------------------------------------------

    def process_frame(self, t, imu_batch, gnss=None, wheel=None) -> EpochReport:
        """Advance one epoch.  gnss is (position_nav, sigma) or None; wheel is
        (speed, sigma) or None; imu_batch spans from the previous frame."""
        fid = self.frame_counter
        self.frame_counter += 1
        if not self.initialized:
            report = self._bootstrap_frame(fid, t, imu_batch)
            self.reports.append(report)
            return report

        timings = {}
        tic = time.perf_counter()
        prev = self.graph.order[-1]
        samples = list(imu_batch)
        state0 = self.graph.states[prev]
        if len(samples) >= 2:
            pred = predict_state(state0, samples, self.params.gravity,
                                 self.config.max_prediction_gap)
        else:
            pred = state0.copy()
        self.times[fid] = t
        self.segments[fid] = samples
        self.graph.add_state(fid, pred)
        if len(samples) >= 2:
            pre = preintegrate(samples, state0.bias_accel, state0.bias_gyro,
                               self.noise)
            self.graph.add_imu_factor(prev, fid, pre)
        self.depths[fid] = DepthMap(
            fid, np.full(self.grid.n, float(np.mean(self.depths[prev].lam))))
        timings["graph_management"] = time.perf_counter() - tic

        tic = time.perf_counter()
        self._append_edges(fid)
        timings["edge_management"] = time.perf_counter() - tic

        if gnss is not None:
            self._handle_gnss(fid, t, gnss)
        if wheel is not None:
            speed, sigma = wheel
            gyro = samples[-1].gyro if samples else np.zeros(3)
            self.graph.add_wheel_factor(fid, speed, gyro, sigma)

        for _ in range(self.config.updates_per_epoch):
            self._update_round(timings)

        report = EpochReport(fid, t, tuple(self.graph.order), timings=timings)
        report.alignment_event = self._try_alignment()

        # decide the fate of the previous provisional frame: it becomes a
        # keyframe iff the coming image moved far enough from the last
        # confirmed keyframe
        if self.provisional is not None:
            idx = self.graph.order.index(self.provisional)
            confirmed = self.graph.order[idx - 1]
            disp = mean_disparity(confirmed, fid, self.cam_poses(),
                                  self.depths, self.K) / 8.0
            report.disparity = disp
            if select_keyframe(disp, self.config.keyframe_disparity_thresh):
                report.keyframe_promoted = True
                for _ in range(self.config.extra_update_on_keyframe):
                    self._update_round(timings)
                if len(self.graph.order) > self.config.window_size:
                    tic = time.perf_counter()
                    report.marginalized = self._marginalize_oldest()
                    timings["marginalization"] = time.perf_counter() - tic
            else:
                self._drop_frame(self.provisional)
                report.dropped_frame = self.provisional
        self.provisional = fid

        report.window = tuple(self.graph.order)
        report.n_edges = len(self.edges)
        report.n_active = self._last_flow_updates
        mid_counts = [self._midrange_count(f) for f in self.graph.order]
        report.n_midrange_max_per_kf = max(mid_counts) if mid_counts else 0
        report.state = self.graph.states[self.graph.order[-1]].copy()
        self.trajectory.append((t, report.state))
        self.reports.append(report)
        return report

    # -- internals ----------------------------------------------------------------

    def _append_edges(self, fid):
        order = self.graph.order
        recent = order[-(self.config.covis_range + 1):-1]
        for k in recent:
            if not self._edges_exist(k, fid):
                self._new_edge(k, fid)
            if not self._edges_exist(fid, k):
                self._new_edge(fid, k)
        cam = self.cam_poses()
        for off in self.config.midrange_offsets:
            idx = len(order) + off - 1
            if idx < 0 or order[idx] in recent:
                continue
            old = order[idx]
            if self._midrange_count(old) >= self.config.max_midrange_per_kf \
                    or self._midrange_count(fid) >= self.config.max_midrange_per_kf:
                continue
            disp = mean_disparity(old, fid, cam, self.depths, self.K)
            valid_frac = self._valid_fraction(old, fid, cam)
            if disp / 8.0 <= 2.0 * self.config.keyframe_disparity_thresh \
                    and valid_frac >= 0.5:
                self._new_edge(old, fid, midrange=True)

    def _valid_fraction(self, i, j, cam):
        from .liegeom import reproject
        _, valid = reproject(self.grid, self.depths[i].lam, cam[i], cam[j],
                             self.K)
        return float(valid.mean())

    def _update_round(self, timings=None):
        timings = timings if timings is not None else {}
        tic = time.perf_counter()
        active = [e for e in self.edges if e.status == "active"]
        active.sort(key=lambda e: (-e.created_epoch, e.source, e.target))
        budget = active[:self.config.max_active_edges]
        for e in active[self.config.max_active_edges:]:
            e.retire()   # crowded out by newer edges, flow target frozen
        for e in budget:
            e.measurement = self._measure((e.source, e.target))
            e.rounds += 1
        self._last_flow_updates = len(budget)
        timings["flow"] = timings.get("flow", 0.0) + time.perf_counter() - tic

        for _ in range(self.config.inner_iterations):
            tic = time.perf_counter()
            cam = self.cam_poses()
            systems = {}
            anchors = sorted({e.source for e in self.edges
                              if e.measurement is not None})
            for a in anchors:
                bundle = [e for e in self.edges
                          if e.source == a and e.measurement is not None]
                blocks = dba.linearize_edges([e.measurement for e in bundle],
                                             cam[a],
                                             [cam[e.target] for e in bundle],
                                             self.depths[a], self.K)
                systems[a] = dba.assemble_frame_system(a, blocks)
            constraints = [dba.schur_eliminate_depth(s)
                           for s in systems.values()]
            if not constraints:
                continue
            vc = dba.accumulate_visual_constraint(constraints,
                                                  tuple(self.graph.order))
            timings["ba_hessian"] = timings.get("ba_hessian", 0.0) \
                + time.perf_counter() - tic

            tic = time.perf_counter()
            self.graph.drop_transient_factors()
            self.graph.add_visual_factor(vc)
            self.graph.optimize(max_iters=1)
            timings["optimization"] = timings.get("optimization", 0.0) \
                + time.perf_counter() - tic

            tic = time.perf_counter()
            cam_new = self.cam_poses()
            for a, sys_a in systems.items():
                xi = np.concatenate([se3_log(cam_new[p].compose(cam[p].inverse()))
                                     for p in sys_a.pose_ids])
                new_depth, _ = dba.update_depths(sys_a, xi, self.depths[a])
                self.depths[a] = new_depth
            timings["depth_update"] = timings.get("depth_update", 0.0) \
                + time.perf_counter() - tic

    def _handle_gnss(self, fid, t, gnss):
        position_nav, sigma = gnss
        if self.alignment.aligned:
            self.graph.add_gnss_factor(fid, position_nav, sigma)
        else:
            self.gnss_queue.append((fid, t, position_nav, sigma))

    def _travelled_distance(self):
        pts = [self.graph.states[f].pose.t for f in self.graph.order]
        return float(sum(np.linalg.norm(b - a) for a, b in zip(pts, pts[1:])))

    def _try_alignment(self):
        """Fix T^n_w once the window spans enough travelled distance."""
        if self.alignment.aligned or not self.gnss_queue:
            return False
        if self._travelled_distance() < self.alignment.distance_thresh:
            return False
        ant = []
        fixes = []
        for fid, t, p_nav, _ in self.gnss_queue:
            if fid not in self.graph.states:
                continue
            x = self.graph.states[fid]
            ant.append(x.pose.t + x.pose.rotation_matrix()
                       @ self.params.lever_gnss)
            fixes.append(p_nav)
        if len(ant) < 3:
            return False
        try:
            _, _, T_nw = gnss_align(np.array(ant), np.array(fixes))
        except DegenerateGeometry:
            return False
        self.alignment.status = "aligned"
        self.alignment.nav_from_world = T_nw
        self.graph.set_alignment(T_nw)
        for fid, t, p_nav, sigma in self.gnss_queue:
            if fid in self.graph.states:
                self.graph.add_gnss_factor(fid, p_nav, sigma)
        self.gnss_queue = []
        return True

    def _marginalize_oldest(self) -> MarginalizedKeyframe:
        oldest = self.graph.order[0]
        cam = self.cam_poses()
        anchored = [e for e in self.edges
                    if e.source == oldest and e.measurement is not None]
        blocks = dba.linearize_edges([e.measurement for e in anchored],
                                     cam[oldest],
                                     [cam[e.target] for e in anchored],
                                     self.depths[oldest], self.K) \
            if anchored else []
        marg_vc = dba.marginal_visual_constraint(blocks, oldest) if blocks \
            else None
        self.graph.drop_transient_factors()
        self.graph.marginalize(oldest, marg_vc)

        record = MarginalizedKeyframe(
            frame_id=oldest, t=self.times[oldest], cam_pose=cam[oldest],
            body_pose=cam[oldest].inverse().compose(self.params.cam_from_body),
            depth=self.depths[oldest],
            neighbors=[(cam[f], self.depths[f]) for f in self.graph.order
                       if f in self.depths and f != oldest])
        if self.map_builder is not None:
            self.map_builder(record)

        self.edges = [e for e in self.edges
                      if oldest not in (e.source, e.target)]
        del self.depths[oldest]
        del self.times[oldest]
        self.segments.pop(oldest, None)
        return record

    def _drop_frame(self, fid):
        """Abandon a provisional frame: merge its IMU span into the successor."""
        order = self.graph.order
        idx = order.index(fid)
        successor = order[idx + 1] if idx + 1 < len(order) else None
        self.graph.drop_transient_factors()
        self.graph.drop_state(fid)
        self.edges = [e for e in self.edges if fid not in (e.source, e.target)]
        if successor is not None:
            merged = _merge_samples(self.segments.get(fid, []),
                                    self.segments.get(successor, []))
            self.segments[successor] = merged
            prev = order[idx - 1]
            state0 = self.graph.states[prev]
            if len(merged) >= 2:
                pre = preintegrate(merged, state0.bias_accel, state0.bias_gyro,
                                   self.noise)
                self.graph.add_imu_factor(prev, successor, pre)
        del self.depths[fid]
        del self.times[fid]
        self.segments.pop(fid, None)
