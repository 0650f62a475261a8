"""IMU preintegration between keyframe epochs and the preintegration residual.

Gravity convention: ``g_w`` is the vector appearing in the residual rows,
i.e. the specific force a resting accelerometer measures, expressed in the
world frame.  For a z-up world this is ``(0, 0, +9.81)``.  Dead reckoning
then follows ``a_world = R (f - b_a) - g_w`` for accelerometer reading f.

Preintegrated quantities depend only on the raw samples and the
linearization bias, never on the absolute state, so they are computed once
per epoch pair and corrected to first order when the bias estimate moves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch, GapTooLarge, NonMonotonicTime, TimeMismatch
from .liegeom import (Transform, skew, so3_exp_matrix, so3_log_matrix,
                      so3_right_jacobian, so3_right_jacobian_inv)

GRAVITY = 9.81

# default continuous-time noise densities, low-cost MEMS class
GYRO_NOISE_DENSITY = 1.7e-4    # rad/s/sqrt(Hz)
ACCEL_NOISE_DENSITY = 2e-3     # m/s^2/sqrt(Hz)
GYRO_BIAS_RW = 2e-5            # rad/s^2/sqrt(Hz)
ACCEL_BIAS_RW = 4e-4           # m/s^3/sqrt(Hz)

BIAS_SAT_ACCEL = 1.0           # m/s^2
BIAS_SAT_GYRO = 0.2            # rad/s


@dataclass
class ImuSample:
    t: float                   # seconds
    gyro: np.ndarray           # (3,) rad/s
    accel: np.ndarray          # (3,) m/s^2

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float)
        self.accel = np.asarray(self.accel, dtype=float)


@dataclass
class NoiseModel:
    gyro_density: float = GYRO_NOISE_DENSITY
    accel_density: float = ACCEL_NOISE_DENSITY
    gyro_bias_rw: float = GYRO_BIAS_RW
    accel_bias_rw: float = ACCEL_BIAS_RW


@dataclass
class NavState:
    """Body pose (body-to-world), velocity and IMU biases.

    Biases are clamped to the configured saturation bounds.
    """

    pose: Transform            # T^w_b
    velocity: np.ndarray       # (3,) m/s in world frame
    bias_accel: np.ndarray     # (3,) m/s^2
    bias_gyro: np.ndarray      # (3,) rad/s

    def __post_init__(self):
        self.velocity = np.asarray(self.velocity, dtype=float).copy()
        self.bias_accel = np.clip(np.asarray(self.bias_accel, dtype=float),
                                  -BIAS_SAT_ACCEL, BIAS_SAT_ACCEL)
        self.bias_gyro = np.clip(np.asarray(self.bias_gyro, dtype=float),
                                 -BIAS_SAT_GYRO, BIAS_SAT_GYRO)

    def copy(self):
        return NavState(self.pose.copy(), self.velocity.copy(),
                        self.bias_accel.copy(), self.bias_gyro.copy())


@dataclass
class Preintegration:
    """Relative motion integrals and their first-order sensitivities."""

    delta_p: np.ndarray        # (3,) m
    delta_v: np.ndarray        # (3,) m/s
    delta_R: np.ndarray        # (3,3)
    dt: float                  # total span, s
    cov: np.ndarray            # (9,9) for [dp, dv, dtheta]
    bias_cov: np.ndarray       # (6,6) random walk of [b_a, b_g] over the span
    J_p_ba: np.ndarray = field(repr=False, default=None)   # (3,3)
    J_p_bg: np.ndarray = field(repr=False, default=None)
    J_v_ba: np.ndarray = field(repr=False, default=None)
    J_v_bg: np.ndarray = field(repr=False, default=None)
    J_R_bg: np.ndarray = field(repr=False, default=None)
    lin_bias_accel: np.ndarray = field(repr=False, default=None)
    lin_bias_gyro: np.ndarray = field(repr=False, default=None)

    def corrected(self, bias_accel, bias_gyro):
        """First-order bias-corrected (delta_p, delta_v, delta_R)."""
        dba = np.asarray(bias_accel, dtype=float) - self.lin_bias_accel
        dbg = np.asarray(bias_gyro, dtype=float) - self.lin_bias_gyro
        dp = self.delta_p + self.J_p_ba @ dba + self.J_p_bg @ dbg
        dv = self.delta_v + self.J_v_ba @ dba + self.J_v_bg @ dbg
        dR = self.delta_R @ so3_exp_matrix(self.J_R_bg @ dbg)
        return dp, dv, dR


def _check_batch(samples):
    if len(samples) < 2:
        raise EmptyBatch("need at least two IMU samples")
    times = np.array([s.t for s in samples])
    if not (np.diff(times) > 0).all():
        raise NonMonotonicTime("IMU timestamps must be strictly increasing")


def preintegrate(samples, bias_accel, bias_gyro,
                 noise: NoiseModel | None = None) -> Preintegration:
    """Midpoint-rule propagation of the relative-motion integrals.

    Covariance is propagated to first order for the error state
    [dp, dv, dtheta]; bias Jacobians are the exact derivatives of the
    discrete recursion, so first-order corrections stay consistent with
    re-integration up to second order in the bias change.
    """
    _check_batch(samples)
    noise = noise or NoiseModel()
    ba = np.asarray(bias_accel, dtype=float)
    bg = np.asarray(bias_gyro, dtype=float)

    dp = np.zeros(3)
    dv = np.zeros(3)
    dR = np.eye(3)
    cov = np.zeros((9, 9))
    J_p_ba = np.zeros((3, 3))
    J_p_bg = np.zeros((3, 3))
    J_v_ba = np.zeros((3, 3))
    J_v_bg = np.zeros((3, 3))
    J_R_bg = np.zeros((3, 3))
    total_dt = 0.0

    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.t - s0.t
        w_mid = 0.5 * (s0.gyro + s1.gyro) - bg
        a0 = s0.accel - ba
        a1 = s1.accel - ba

        phi = w_mid * dt
        R_step = so3_exp_matrix(phi)
        Jr = so3_right_jacobian(phi)
        dR_next = dR @ R_step

        f0 = dR @ a0
        f1 = dR_next @ a1
        f_mid = 0.5 * (f0 + f1)

        # exact first-order sensitivities of the discrete recursion
        J_R_bg_next = R_step.T @ J_R_bg - Jr * dt
        dA_bg = -0.5 * (dR @ skew(a0) @ J_R_bg + dR_next @ skew(a1) @ J_R_bg_next)
        dA_ba = -0.5 * (dR + dR_next)
        J_p_ba += J_v_ba * dt + 0.5 * dA_ba * dt * dt
        J_p_bg += J_v_bg * dt + 0.5 * dA_bg * dt * dt
        J_v_ba += dA_ba * dt
        J_v_bg += dA_bg * dt

        # covariance, error state [dp, dv, dtheta]
        A = np.eye(9)
        A[:3, 3:6] = np.eye(3) * dt
        A[:3, 6:] = -0.5 * dR @ skew(0.5 * (a0 + a1)) * dt * dt
        A[3:6, 6:] = -dR @ skew(0.5 * (a0 + a1)) * dt
        A[6:, 6:] = R_step.T
        B = np.zeros((9, 6))
        B[:3, :3] = 0.5 * dR * dt * dt
        B[3:6, :3] = dR * dt
        B[6:, 3:] = Jr * dt
        Q = np.zeros((6, 6))
        Q[:3, :3] = np.eye(3) * noise.accel_density**2 / dt
        Q[3:, 3:] = np.eye(3) * noise.gyro_density**2 / dt
        cov = A @ cov @ A.T + B @ Q @ B.T

        dp = dp + dv * dt + 0.5 * f_mid * dt * dt
        dv = dv + f_mid * dt
        dR = dR_next
        J_R_bg = J_R_bg_next
        total_dt += dt

    bias_cov = np.zeros((6, 6))
    bias_cov[:3, :3] = np.eye(3) * noise.accel_bias_rw**2 * total_dt
    bias_cov[3:, 3:] = np.eye(3) * noise.gyro_bias_rw**2 * total_dt
    return Preintegration(dp, dv, dR, total_dt, 0.5 * (cov + cov.T), bias_cov,
                          J_p_ba, J_p_bg, J_v_ba, J_v_bg, J_R_bg,
                          ba.copy(), bg.copy())


def imu_residual(x_k: NavState, x_k1: NavState, pre: Preintegration, g_w,
                 epoch_gap: float | None = None, with_jacobians: bool = False):
    """15-row preintegration residual, its information matrix and Jacobians.

    Rows: [position (3), velocity (3), rotation (3), accel bias (3),
    gyro bias (3)].  Jacobians are with respect to right perturbations of the
    poses and additive perturbations of velocity/biases, state order
    [rho, theta, v, b_a, b_g] per epoch.
    """
    if epoch_gap is not None and abs(pre.dt - epoch_gap) > 1e-3:
        raise TimeMismatch(f"preintegration spans {pre.dt:.6f}s, "
                           f"epoch gap is {epoch_gap:.6f}s")
    g_w = np.asarray(g_w, dtype=float)
    dt = pre.dt
    R_k = x_k.pose.rotation_matrix()
    R_k1 = x_k1.pose.rotation_matrix()
    p_k, p_k1 = x_k.pose.t, x_k1.pose.t
    v_k, v_k1 = x_k.velocity, x_k1.velocity

    dp, dv, dR = pre.corrected(x_k.bias_accel, x_k.bias_gyro)

    u_p = p_k1 - p_k + 0.5 * g_w * dt * dt - v_k * dt
    u_v = v_k1 + g_w * dt - v_k
    r_p = R_k.T @ u_p - dp
    r_v = R_k.T @ u_v - dv
    Q = R_k.T @ R_k1 @ dR.T
    r_R = so3_log_matrix(Q)
    r_ba = x_k1.bias_accel - x_k.bias_accel
    r_bg = x_k1.bias_gyro - x_k.bias_gyro
    r = np.concatenate([r_p, r_v, r_R, r_ba, r_bg])

    info = np.zeros((15, 15))
    info[:9, :9] = np.linalg.inv(pre.cov + 1e-18 * np.eye(9))
    info[9:, 9:] = np.linalg.inv(pre.bias_cov + 1e-18 * np.eye(6))

    if not with_jacobians:
        return r, info

    Jk = np.zeros((15, 15))
    Jk1 = np.zeros((15, 15))
    Jr_inv = so3_right_jacobian_inv(r_R)

    # position row
    Jk[:3, :3] = -np.eye(3)                       # p_k moves by R_k rho
    Jk[:3, 3:6] = skew(R_k.T @ u_p)
    Jk[:3, 6:9] = -R_k.T * dt
    Jk[:3, 9:12] = -pre.J_p_ba
    Jk[:3, 12:15] = -pre.J_p_bg
    Jk1[:3, :3] = R_k.T @ R_k1

    # velocity row
    Jk[3:6, 3:6] = skew(R_k.T @ u_v)
    Jk[3:6, 6:9] = -R_k.T
    Jk[3:6, 9:12] = -pre.J_v_ba
    Jk[3:6, 12:15] = -pre.J_v_bg
    Jk1[3:6, 6:9] = R_k.T

    # rotation row; the bias column chains through the right Jacobian of the
    # correction rotvec already applied in corrected()
    phi = pre.J_R_bg @ (x_k.bias_gyro - pre.lin_bias_gyro)
    Jk[6:9, 3:6] = -Jr_inv @ Q.T
    Jk[6:9, 12:15] = -Jr_inv @ pre.delta_R @ so3_right_jacobian(-phi) @ pre.J_R_bg
    Jk1[6:9, 3:6] = Jr_inv @ dR

    # bias rows
    Jk[9:12, 9:12] = -np.eye(3)
    Jk[12:15, 12:15] = -np.eye(3)
    Jk1[9:12, 9:12] = np.eye(3)
    Jk1[12:15, 12:15] = np.eye(3)
    return r, info, Jk, Jk1


def predict_state(x_k: NavState, samples, g_w, max_gap: float = 1.0) -> NavState:
    """Dead-reckon forward through the sample batch with current biases."""
    _check_batch(samples)
    span = samples[-1].t - samples[0].t
    if span > max_gap:
        raise GapTooLarge(f"prediction over {span:.3f}s exceeds {max_gap:.3f}s")
    g_w = np.asarray(g_w, dtype=float)
    R = x_k.pose.rotation_matrix()
    p = x_k.pose.t.copy()
    v = x_k.velocity.copy()
    for s0, s1 in zip(samples[:-1], samples[1:]):
        dt = s1.t - s0.t
        w_mid = 0.5 * (s0.gyro + s1.gyro) - x_k.bias_gyro
        R_next = R @ so3_exp_matrix(w_mid * dt)
        a_w = 0.5 * (R @ (s0.accel - x_k.bias_accel)
                     + R_next @ (s1.accel - x_k.bias_accel)) - g_w
        p = p + v * dt + 0.5 * a_w * dt * dt
        v = v + a_w * dt
        R = R_next
    return NavState(Transform.from_rotation_translation(R, p), v,
                    x_k.bias_accel, x_k.bias_gyro)
