"""Pluggable flow-measurement provider plus a synthetic oracle scene.

The production system expects a provider that, given a co-visibility edge
and the current states, returns a flow target with per-pixel confidence
weights.  The synthetic provider here generates those measurements from a
ground-truth trajectory over an analytic height field, which makes every
downstream module verifiable at desk scale: with zero noise the target is
exactly the ground-truth reprojection and the whole pipeline's fixed point
is the true trajectory.

Body frame convention: +y forward (along travel), +x right, +z up.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .dba import DepthMap, FlowMeasurement
from .imu import GRAVITY, ImuSample
from .liegeom import (DEPTH_MIN, LAMBDA_MIN, Intrinsics, PixelGrid, Transform,
                      reproject)

MAX_EDGES_PER_CALL = 48        # provider budget for one update round
COVISIBLE_MIN_VALID = 0.25     # below this valid fraction frames are not co-visible


class FlowProvider(Protocol):
    """Interface filled by the learned frontend in the full system."""

    max_edges_per_call: int

    def measure(self, edge: tuple[int, int], times: dict, states: dict,
                depths: dict) -> FlowMeasurement:
        """Flow target and weights for edge (source, target).

        times maps frame id to timestamp; states maps frame id to the
        current world-to-camera Transform; depths maps frame id to the
        current DepthMap.  The returned valid mask never marks pixels that
        are geometrically invalid and all weights are finite.
        """
        ...


# ---------------------------------------------------------------------------
# Analytic trajectories (closed-form position, velocity, acceleration, yaw)
# ---------------------------------------------------------------------------

class CircleTrajectory:
    """Constant-speed circle at fixed height, body +y tangent to the path."""

    def __init__(self, radius=15.0, speed=2.0, height=1.5, center=(0.0, 0.0)):
        self.radius = radius
        self.speed = speed
        self.height = height
        self.center = np.asarray(center, dtype=float)
        self.rate = speed / radius

    def position(self, t):
        a = self.rate * np.asarray(t, dtype=float)
        return np.stack([self.center[0] + self.radius * np.cos(a),
                         self.center[1] + self.radius * np.sin(a),
                         np.broadcast_to(self.height, np.shape(a))], axis=-1)

    def velocity(self, t):
        a = self.rate * np.asarray(t, dtype=float)
        v = self.radius * self.rate
        return np.stack([-v * np.sin(a), v * np.cos(a),
                         np.zeros(np.shape(a))], axis=-1)

    def acceleration(self, t):
        a = self.rate * np.asarray(t, dtype=float)
        c = self.radius * self.rate**2
        return np.stack([-c * np.cos(a), -c * np.sin(a),
                         np.zeros(np.shape(a))], axis=-1)

    def yaw(self, t):
        return self.rate * np.asarray(t, dtype=float) + np.pi / 2.0

    def yaw_rate(self, t):
        return np.broadcast_to(self.rate, np.shape(t)).astype(float)


class FigureEightTrajectory:
    """Gerono lemniscate at fixed height."""

    def __init__(self, span_x=20.0, span_y=10.0, period=60.0, height=1.5):
        self.ax = span_x
        self.ay = span_y
        self.w = 2.0 * np.pi / period
        self.height = height

    def position(self, t):
        wt = self.w * np.asarray(t, dtype=float)
        return np.stack([self.ax * np.sin(wt),
                         self.ay * np.sin(wt) * np.cos(wt),
                         np.broadcast_to(self.height, np.shape(wt))], axis=-1)

    def velocity(self, t):
        wt = self.w * np.asarray(t, dtype=float)
        return np.stack([self.ax * self.w * np.cos(wt),
                         self.ay * self.w * np.cos(2 * wt),
                         np.zeros(np.shape(wt))], axis=-1)

    def acceleration(self, t):
        wt = self.w * np.asarray(t, dtype=float)
        return np.stack([-self.ax * self.w**2 * np.sin(wt),
                         -2 * self.ay * self.w**2 * np.sin(2 * wt),
                         np.zeros(np.shape(wt))], axis=-1)

    def yaw(self, t):
        v = self.velocity(t)
        return np.arctan2(v[..., 1], v[..., 0])

    def yaw_rate(self, t):
        return _heading_rate(self.velocity(t), self.acceleration(t))


def _heading_rate(v, a):
    """Rate of atan2(vy, vx); zero where the horizontal speed vanishes."""
    denom = v[..., 0]**2 + v[..., 1]**2
    num = v[..., 0] * a[..., 1] - v[..., 1] * a[..., 0]
    return np.where(denom > 1e-12, num / np.where(denom > 1e-12, denom, 1.0), 0.0)


class StraightTrajectory:
    """Straight run with optional smooth lateral weave (turns).

    With weave_amplitude = 0 this is constant-velocity motion, which leaves
    the monocular scale unobservable and should trip the initialization
    excitation check.
    """

    def __init__(self, speed=2.0, height=1.5, weave_amplitude=0.0,
                 weave_period=8.0):
        self.speed = speed
        self.height = height
        self.amp = weave_amplitude
        self.w = 2.0 * np.pi / weave_period

    def position(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([self.speed * t,
                         self.amp * np.sin(self.w * t),
                         np.broadcast_to(self.height, np.shape(t))], axis=-1)

    def velocity(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([np.broadcast_to(self.speed, np.shape(t)).astype(float),
                         self.amp * self.w * np.cos(self.w * t),
                         np.zeros(np.shape(t))], axis=-1)

    def acceleration(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([np.zeros(np.shape(t)),
                         -self.amp * self.w**2 * np.sin(self.w * t),
                         np.zeros(np.shape(t))], axis=-1)

    def yaw(self, t):
        v = self.velocity(t)
        return np.arctan2(v[..., 1], v[..., 0])

    def yaw_rate(self, t):
        return _heading_rate(self.velocity(t), self.acceleration(t))


TRAJECTORY_KINDS = {
    "circle": CircleTrajectory,
    "figure8": FigureEightTrajectory,
    "straight": StraightTrajectory,
}


def body_rotation(yaw):
    """R^w_b for a level body with +y pointing along heading `yaw`."""
    s, c = np.sin(yaw), np.cos(yaw)
    return np.array([[s, c, 0.0], [-c, s, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# Height field (ground surface) and the synthetic scene
# ---------------------------------------------------------------------------

@dataclass
class HeightField:
    """Ground surface z = amplitude * sin(kx x) * sin(ky y)."""

    amplitude: float = 0.0
    kx: float = 0.5
    ky: float = 0.5

    def height(self, x, y):
        if self.amplitude == 0.0:
            return np.zeros(np.shape(x))
        return self.amplitude * np.sin(self.kx * x) * np.sin(self.ky * y)

    def grad(self, x, y):
        if self.amplitude == 0.0:
            z = np.zeros(np.shape(x))
            return z, z
        gx = self.amplitude * self.kx * np.cos(self.kx * x) * np.sin(self.ky * y)
        gy = self.amplitude * self.ky * np.sin(self.kx * x) * np.cos(self.ky * y)
        return gx, gy


@dataclass
class NoiseConfig:
    flow_sigma: float = 0.0        # px, per axis
    weight_floor_sigma: float = 1e-3   # px, lower bound entering 1/sigma^2
    border_taper: bool = False     # cosine attenuation of weights near borders
    dynamic_fraction: float = 0.0  # fraction of pixels emulating moving objects
    dynamic_offset: float = 30.0   # px magnitude of the injected wrong flow
    dynamic_weight: float = 1e-12  # near-zero confidence on dynamic pixels


@dataclass
class SyntheticScene:
    """Ground-truth world: trajectory over a height field, seen by a camera.

    cam_from_body (T^c_b) maps body-frame points into the camera frame.
    The default mounting looks along body +y (forward) pitched down.
    """

    trajectory: object
    intrinsics: Intrinsics
    cam_from_body: Transform
    surface: HeightField = field(default_factory=HeightField)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def body_pose(self, t) -> Transform:
        R = body_rotation(float(self.trajectory.yaw(t)))
        return Transform.from_rotation_translation(R, self.trajectory.position(t))

    def camera_pose(self, t) -> Transform:
        """World-to-camera transform at time t."""
        return self.cam_from_body.compose(self.body_pose(t).inverse())

    def body_rates(self, t):
        """Angular velocity in the body frame (level body, yaw only)."""
        return np.array([0.0, 0.0, float(self.trajectory.yaw_rate(t))])

    def gt_inverse_depth(self, t):
        """Ray-cast the grid onto the surface: (lam, hit) for the keyframe at t.

        Results are cached per timestamp; the ground truth never changes.
        """
        key = round(float(t), 9)
        cache = self.__dict__.setdefault("_depth_cache", {})
        if key in cache:
            return cache[key]
        out = self._raycast(t)
        if len(cache) > 4096:
            cache.clear()
        cache[key] = out
        return out

    def _raycast(self, t):
        K = self.intrinsics
        grid = PixelGrid.from_intrinsics(K)
        T_cw = self.camera_pose(t)
        T_wc = T_cw.inverse()
        Rwc = T_wc.rotation_matrix()
        center = T_wc.t
        rays = np.stack([(grid.coords[:, 0] - K.cx) / K.fx,
                         (grid.coords[:, 1] - K.cy) / K.fy,
                         np.ones(grid.n)], axis=1) @ Rwc.T

        down = rays[:, 2] < -1e-6
        rz = np.where(down, rays[:, 2], -1.0)
        Z = (self.surface.height(center[0], center[1]) - center[2]) / rz
        Z = np.maximum(Z, 10 * DEPTH_MIN)
        if self.surface.amplitude != 0.0:
            for _ in range(30):  # Newton on the ray-surface intersection
                x = center[0] + Z * rays[:, 0]
                y = center[1] + Z * rays[:, 1]
                f = center[2] + Z * rays[:, 2] - self.surface.height(x, y)
                gx, gy = self.surface.grad(x, y)
                df = rays[:, 2] - gx * rays[:, 0] - gy * rays[:, 1]
                Z = Z - f / df
            Z = np.maximum(Z, 10 * DEPTH_MIN)
        hit = down & (Z > DEPTH_MIN)
        lam = np.where(hit, 1.0 / Z, LAMBDA_MIN)
        return lam, hit

    def gt_depth_map(self, frame_id, t) -> DepthMap:
        lam, _ = self.gt_inverse_depth(t)
        return DepthMap(frame_id, lam)

    # -- sensor synthesis --------------------------------------------------

    def gravity_world(self):
        """Specific-force-at-rest vector (z-up world)."""
        return np.array([0.0, 0.0, GRAVITY])

    def imu_samples(self, t0, t1, rate=200.0, bias_accel=None, bias_gyro=None,
                    noise_gyro=0.0, noise_accel=0.0, rng=None):
        """Samples covering [t0, t1] inclusive at the given rate."""
        n = max(int(round((t1 - t0) * rate)), 1)
        times = t0 + np.arange(n + 1) * (t1 - t0) / n
        ba = np.zeros(3) if bias_accel is None else np.asarray(bias_accel)
        bg = np.zeros(3) if bias_gyro is None else np.asarray(bias_gyro)
        g = self.gravity_world()
        out = []
        for t in times:
            Rwb = body_rotation(float(self.trajectory.yaw(t)))
            f = Rwb.T @ (self.trajectory.acceleration(t) + g) + ba
            w = self.body_rates(t) + bg
            if rng is not None and (noise_gyro > 0 or noise_accel > 0):
                f = f + noise_accel * rng.standard_normal(3)
                w = w + noise_gyro * rng.standard_normal(3)
            out.append(ImuSample(float(t), w, f))
        return out

    def wheel_speed(self, t, lever_arm, sigma=0.0, rng=None):
        """Forward (body +y) speed at the wheel lever-arm point."""
        Rwb = body_rotation(float(self.trajectory.yaw(t)))
        v_body = Rwb.T @ self.trajectory.velocity(t)
        v = v_body + np.cross(self.body_rates(t), np.asarray(lever_arm))
        val = float(v[1])
        if rng is not None and sigma > 0:
            val += sigma * float(rng.standard_normal())
        return val

    def antenna_position(self, t, lever_arm):
        """GNSS phase-center position in the world frame."""
        Rwb = body_rotation(float(self.trajectory.yaw(t)))
        return self.trajectory.position(t) + Rwb @ np.asarray(lever_arm)


def default_cam_from_body(pitch_down=np.deg2rad(25.0)) -> Transform:
    """Camera looking along body +y, pitched down toward the ground.

    Camera axes: +z optical (forward), +x right, +y down in the image.
    """
    # body -> camera before pitch: x_c = x_b, y_c = -z_b, z_c = y_b
    base = np.array([[1.0, 0.0, 0.0],
                     [0.0, 0.0, -1.0],
                     [0.0, 1.0, 0.0]])
    cp, sp = np.cos(pitch_down), np.sin(pitch_down)
    pitch = np.array([[1.0, 0.0, 0.0],
                      [0.0, cp, -sp],
                      [0.0, sp, cp]])
    return Transform.from_rotation_translation(pitch @ base, np.zeros(3))


# ---------------------------------------------------------------------------
# Synthetic flow oracle
# ---------------------------------------------------------------------------

def _edge_rng(seed, i, j):
    """Per-edge random stream, independent of call order."""
    return np.random.default_rng(np.random.SeedSequence((int(seed), int(i), int(j))))


def synthetic_flow(edge, t_i, t_j, scene: SyntheticScene, seed=0) -> FlowMeasurement:
    """Ground-truth flow target + Gaussian pixel noise, inverse-variance weights.

    A configurable fraction of pixels is marked dynamic: they receive a large
    flow offset and near-zero weight, emulating the learned down-weighting of
    moving objects.
    """
    i, j = edge
    K = scene.intrinsics
    grid = PixelGrid.from_intrinsics(K)
    lam, hit = scene.gt_inverse_depth(t_i)
    Ti = scene.camera_pose(t_i)
    Tj = scene.camera_pose(t_j)
    flow, valid = reproject(grid, lam, Ti, Tj, K)
    valid = valid & hit

    rng = _edge_rng(seed, i, j)
    cfg = scene.noise
    target = flow.copy()
    if cfg.flow_sigma > 0:
        target = target + cfg.flow_sigma * rng.standard_normal(flow.shape)

    sigma_eff = max(cfg.flow_sigma, cfg.weight_floor_sigma)
    w = np.full((grid.n, 2), 1.0 / sigma_eff**2)
    if cfg.border_taper:
        tu = np.sin(np.pi * grid.coords[:, 0] / K.width)
        tv = np.sin(np.pi * grid.coords[:, 1] / K.height)
        w *= (0.25 + 0.75 * (tu * tv))[:, None]

    n_dyn = min(int(np.floor(cfg.dynamic_fraction * grid.n)), int(valid.sum()))
    if n_dyn > 0:
        idx = rng.choice(np.flatnonzero(valid), size=n_dyn, replace=False)
        ang = rng.uniform(0, 2 * np.pi, size=n_dyn)
        target[idx, 0] += cfg.dynamic_offset * np.cos(ang)
        target[idx, 1] += cfg.dynamic_offset * np.sin(ang)
        w[idx] = cfg.dynamic_weight

    w = w * valid[:, None]
    return FlowMeasurement(i, j, np.where(valid[:, None], target, 0.0), w, valid)


class SyntheticFlowProvider:
    """FlowProvider backed by a ground-truth scene.

    Measurements depend only on (seed, edge, frame times), so repeated calls
    for the same edge are served from a small memo.
    """

    def __init__(self, scene: SyntheticScene, seed=0,
                 max_edges_per_call=MAX_EDGES_PER_CALL):
        self.scene = scene
        self.seed = seed
        self.max_edges_per_call = max_edges_per_call
        self._memo = {}

    def measure(self, edge, times, states, depths) -> FlowMeasurement:
        i, j = edge
        key = (i, j, round(times[i], 9), round(times[j], 9))
        meas = self._memo.get(key)
        if meas is None:
            if len(self._memo) > 8192:
                self._memo.clear()
            meas = synthetic_flow(edge, times[i], times[j], self.scene,
                                  self.seed)
            self._memo[key] = meas
        return meas


def mean_disparity(source, target, cam_poses: dict, depths: dict,
                   K: Intrinsics) -> float:
    """Mean grid-point displacement of edge source->target at current states.

    Returns +inf when fewer than a quarter of the pixels stay valid, which
    marks the pair as not co-visible.
    """
    grid = PixelGrid.from_intrinsics(K)
    flow, valid = reproject(grid, depths[source].lam, cam_poses[source],
                            cam_poses[target], K)
    if valid.sum() < COVISIBLE_MIN_VALID * grid.n:
        return np.inf
    d = flow[valid] - grid.coords[valid]
    return float(np.mean(np.linalg.norm(d, axis=1)))


def measurement_disparity(meas: FlowMeasurement, grid: PixelGrid) -> float:
    """Disparity read directly off a flow measurement (used before states exist)."""
    if meas.valid_mask.sum() < COVISIBLE_MIN_VALID * grid.n:
        return np.inf
    d = meas.target_flow[meas.valid_mask] - grid.coords[meas.valid_mask]
    return float(np.mean(np.linalg.norm(d, axis=1)))
