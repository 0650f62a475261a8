"""Pose-centered sliding-window factor graph over navigation states.

States are 15-DOF (pose, velocity, accelerometer/gyroscope bias) keyed by
epoch id.  Tangents use a RIGHT perturbation for the body pose
(T <- T * exp(xi)) and additive perturbations elsewhere, ordered per state
as [rho, theta, v, b_a, b_g].

The depth-eliminated visual constraint lives on camera-pose tangents with a
LEFT perturbation; it enters the body-state graph through the constant
linear change of variables  xi_cam = -Adj(T^c_b) xi_body,  applied as a
congruence transform of its Hessian blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .dba import VisualConstraint
from .errors import (DanglingFactor, IndexOutOfWindow, NotAligned,
                     SingularSystem)
from .imu import NavState, Preintegration, imu_residual
from .liegeom import Transform, adjoint, se3_exp, se3_log, skew

STATE_DIM = 15
CONVERGENCE_TOL = 1e-8


@dataclass
class FixedParams:
    """Calibration constants shared by all factors."""

    cam_from_body: Transform                  # T^c_b
    gravity: np.ndarray                       # g^w, specific force at rest (z-up)
    lever_gnss: np.ndarray = field(default_factory=lambda: np.zeros(3))   # t^b_g
    lever_wheel: np.ndarray = field(default_factory=lambda: np.zeros(3))  # t^b_s
    wheel_forward_axis: int = 1               # body +y is forward


def state_boxminus(x: NavState, ref: NavState):
    """15-vector tangent e with x = ref boxplus e (pose right convention)."""
    e = np.empty(STATE_DIM)
    e[:6] = se3_log(ref.pose.inverse().compose(x.pose))
    e[6:9] = x.velocity - ref.velocity
    e[9:12] = x.bias_accel - ref.bias_accel
    e[12:15] = x.bias_gyro - ref.bias_gyro
    return e


def state_boxplus(x: NavState, d) -> NavState:
    d = np.asarray(d, dtype=float)
    return NavState(x.pose.compose(se3_exp(d[:6])),
                    x.velocity + d[6:9],
                    x.bias_accel + d[9:12],
                    x.bias_gyro + d[12:15])


class QuadraticFactor:
    """Stored quadratic energy 0.5 e'He - e'v on tangents about a snapshot.

    The error e is the boxminus of the current states from the stored
    linearization points, corrected to first order when states move.
    """

    transient = False

    def __init__(self, ids, H, v, snapshots):
        self.ids = tuple(ids)
        self.H = 0.5 * (np.asarray(H, float) + np.asarray(H, float).T)
        self.v = np.asarray(v, dtype=float)
        self.snapshots = [s.copy() for s in snapshots]

    def _error(self, states):
        return np.concatenate([state_boxminus(states[i], s)
                               for i, s in zip(self.ids, self.snapshots)])

    def cost(self, states):
        e = self._error(states)
        return float(0.5 * e @ self.H @ e - e @ self.v)

    def contribution(self, states):
        e = self._error(states)
        return self.H, self.v - self.H @ e


class MarginalizationPrior(QuadraticFactor):
    """Quadratic prior produced by eliminating states that left the window."""


class VisualFactor(QuadraticFactor):
    """Depth-eliminated DBA constraint mapped onto body-state tangents.

    Rebuilt from fresh linearizations every update round, hence transient:
    it never takes part in marginalization.
    """

    transient = True


def visual_factor_from_constraint(vc: VisualConstraint, states,
                                  cam_from_body: Transform) -> VisualFactor:
    """Congruence-transform a camera-tangent constraint to body tangents."""
    M = -adjoint(cam_from_body)
    K = len(vc.indices)
    H = np.zeros((STATE_DIM * K, STATE_DIM * K))
    v = np.zeros(STATE_DIM * K)
    for a in range(K):
        v6 = M.T @ vc.v[6 * a:6 * a + 6]
        v[STATE_DIM * a:STATE_DIM * a + 6] = v6
        for b in range(K):
            H6 = M.T @ vc.H[6 * a:6 * a + 6, 6 * b:6 * b + 6] @ M
            H[STATE_DIM * a:STATE_DIM * a + 6,
              STATE_DIM * b:STATE_DIM * b + 6] = H6
    return VisualFactor(vc.indices, H, v, [states[i] for i in vc.indices])


class ImuFactor:
    """Preintegration factor between consecutive epochs."""

    transient = False

    def __init__(self, id_a, id_b, pre: Preintegration, gravity):
        self.ids = (id_a, id_b)
        self.pre = pre
        self.gravity = np.asarray(gravity, dtype=float)

    def residual(self, states):
        return imu_residual(states[self.ids[0]], states[self.ids[1]],
                            self.pre, self.gravity, with_jacobians=True)

    def cost(self, states):
        r, info = imu_residual(states[self.ids[0]], states[self.ids[1]],
                               self.pre, self.gravity)
        return float(0.5 * r @ info @ r)

    def contribution(self, states):
        r, info, Jk, Jk1 = self.residual(states)
        J = np.hstack([Jk, Jk1])
        return J.T @ info @ J, -(J.T @ (info @ r))


class GnssFactor:
    """Position of the GNSS antenna in the navigation frame (Eq-style lever arm)."""

    transient = False

    def __init__(self, epoch, position_nav, sigma, lever_arm, nav_from_world):
        self.ids = (epoch,)
        self.p_meas = np.asarray(position_nav, dtype=float)
        self.info = np.eye(3) / sigma**2
        self.lever = np.asarray(lever_arm, dtype=float)
        self.T_nw = nav_from_world

    def residual(self, states):
        x = states[self.ids[0]]
        R = x.pose.rotation_matrix()
        p_ant_w = x.pose.t + R @ self.lever
        r = self.T_nw.apply(p_ant_w) - self.p_meas
        J = np.zeros((3, STATE_DIM))
        Rn = self.T_nw.rotation_matrix()
        J[:, :3] = Rn @ R
        J[:, 3:6] = -Rn @ R @ skew(self.lever)
        return r, J

    def cost(self, states):
        r, _ = self.residual(states)
        return float(0.5 * r @ self.info @ r)

    def contribution(self, states):
        r, J = self.residual(states)
        return J.T @ self.info @ J, -(J.T @ (self.info @ r))


class WheelFactor:
    """Forward-axis speed at the wheel lever arm, simplified model."""

    transient = False

    def __init__(self, epoch, speed, gyro, sigma, lever_arm, forward_axis=1):
        self.ids = (epoch,)
        self.speed = float(speed)
        self.gyro = np.asarray(gyro, dtype=float)   # bias-uncorrected body rate
        self.info = 1.0 / sigma**2
        self.lever = np.asarray(lever_arm, dtype=float)
        self.axis = forward_axis

    def residual(self, states):
        x = states[self.ids[0]]
        R = x.pose.rotation_matrix()
        v_body = R.T @ x.velocity
        omega = self.gyro - x.bias_gyro
        pred = v_body + np.cross(omega, self.lever)
        r = np.array([pred[self.axis] - self.speed])
        J = np.zeros((1, STATE_DIM))
        J[0, 3:6] = skew(v_body)[self.axis]
        J[0, 6:9] = R.T[self.axis]
        J[0, 12:15] = skew(self.lever)[self.axis]
        return r, J

    def cost(self, states):
        r, _ = self.residual(states)
        return float(0.5 * self.info * r[0]**2)

    def contribution(self, states):
        r, J = self.residual(states)
        return self.info * (J.T @ J), -self.info * (J.T @ r).ravel()


@dataclass
class OptimizeReport:
    iterations: int = 0
    applied_steps: int = 0
    converged: bool = False
    costs: list = field(default_factory=list)
    final_step_norm: float = 0.0


class FactorGraph:
    """Sliding window of NavStates plus the factors connecting them."""

    def __init__(self, params: FixedParams, max_window: int = 15):
        self.params = params
        self.max_window = max_window
        self.states: dict[int, NavState] = {}
        self.order: list[int] = []
        self.factors: list = []
        self.nav_from_world: Transform | None = None   # T^n_w once aligned

    # -- window management --------------------------------------------------

    def add_state(self, epoch: int, state: NavState):
        if len(self.order) >= self.max_window:
            raise IndexOutOfWindow(f"window is full ({self.max_window})")
        if epoch in self.states:
            raise ValueError(f"epoch {epoch} already in window")
        self.states[epoch] = state.copy()
        self.order.append(epoch)

    def _check_ids(self, ids):
        for i in ids:
            if i not in self.states:
                raise IndexOutOfWindow(f"epoch {i} not in window")

    def set_alignment(self, nav_from_world: Transform):
        self.nav_from_world = nav_from_world

    def drop_state(self, epoch: int):
        """Discard a state and every factor touching it (no marginalization)."""
        if epoch not in self.states:
            raise IndexOutOfWindow(f"epoch {epoch} not in window")
        if any(isinstance(f, MarginalizationPrior) and epoch in f.ids
               for f in self.factors):
            raise DanglingFactor("cannot drop a state constrained by the "
                                 "marginalization prior")
        self.factors = [f for f in self.factors if epoch not in f.ids]
        del self.states[epoch]
        self.order.remove(epoch)

    # -- factor construction --------------------------------------------------

    def add_visual_factor(self, vc: VisualConstraint):
        self._check_ids(vc.indices)
        f = visual_factor_from_constraint(vc, self.states,
                                          self.params.cam_from_body)
        self.factors.append(f)
        return f

    def drop_transient_factors(self):
        self.factors = [f for f in self.factors if not f.transient]

    def add_imu_factor(self, epoch_a, epoch_b, pre: Preintegration):
        self._check_ids((epoch_a, epoch_b))
        f = ImuFactor(epoch_a, epoch_b, pre, self.params.gravity)
        self.factors.append(f)
        return f

    def add_gnss_factor(self, epoch, position_nav, sigma):
        if self.nav_from_world is None:
            raise NotAligned("GNSS factor requires the world-to-navigation "
                             "alignment to be fixed first")
        self._check_ids((epoch,))
        f = GnssFactor(epoch, position_nav, sigma, self.params.lever_gnss,
                       self.nav_from_world)
        self.factors.append(f)
        return f

    def add_wheel_factor(self, epoch, speed, gyro, sigma):
        self._check_ids((epoch,))
        f = WheelFactor(epoch, speed, gyro, sigma, self.params.lever_wheel,
                        self.params.wheel_forward_axis)
        self.factors.append(f)
        return f

    def add_prior(self, epoch, pose_sigma, vel_sigma, bias_accel_sigma,
                  bias_gyro_sigma):
        """Diagonal prior pinning a state at its current estimate."""
        self._check_ids((epoch,))
        diag = np.concatenate([np.full(6, 1.0 / pose_sigma**2),
                               np.full(3, 1.0 / vel_sigma**2),
                               np.full(3, 1.0 / bias_accel_sigma**2),
                               np.full(3, 1.0 / bias_gyro_sigma**2)])
        f = QuadraticFactor((epoch,), np.diag(diag), np.zeros(STATE_DIM),
                            [self.states[epoch]])
        self.factors.append(f)
        return f

    # -- solving ---------------------------------------------------------------

    def total_cost(self, states=None):
        states = states if states is not None else self.states
        return sum(f.cost(states) for f in self.factors)

    def _assemble(self):
        slot = {e: k for k, e in enumerate(self.order)}
        dim = STATE_DIM * len(self.order)
        H = np.zeros((dim, dim))
        v = np.zeros(dim)
        for f in self.factors:
            Hf, vf = f.contribution(self.states)
            idx = np.concatenate([np.arange(STATE_DIM * slot[i],
                                            STATE_DIM * slot[i] + STATE_DIM)
                                  for i in f.ids])
            H[np.ix_(idx, idx)] += Hf
            v[idx] += vf
        return H, v

    def optimize(self, max_iters: int = 10) -> OptimizeReport:
        """Gauss-Newton with step halving; states are retracted in place."""
        report = OptimizeReport(costs=[self.total_cost()])
        for _ in range(max_iters):
            H, v = self._assemble()
            report.iterations += 1
            try:
                dx = scipy.linalg.solve(H, v, assume_a="pos")
            except (scipy.linalg.LinAlgError, ValueError):
                raise SingularSystem("normal equations are not positive "
                                     "definite; graph lacks an anchor or is "
                                     "rank deficient") from None
            if not np.isfinite(dx).all():
                raise SingularSystem("non-finite Gauss-Newton step")
            report.final_step_norm = float(np.abs(dx).max())
            if report.final_step_norm < CONVERGENCE_TOL:
                report.converged = True
                break
            step = 1.0
            accepted = False
            for _ in range(8):
                trial = {}
                for k, e in enumerate(self.order):
                    d = step * dx[STATE_DIM * k:STATE_DIM * (k + 1)]
                    trial[e] = state_boxplus(self.states[e], d)
                cost = self.total_cost(trial)
                if cost <= report.costs[-1] * (1 + 1e-12) + 1e-15:
                    self.states = trial
                    report.costs.append(cost)
                    report.applied_steps += 1
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
        return report

    # -- marginalization --------------------------------------------------------

    def marginalize(self, oldest: int, marg_vc: VisualConstraint | None = None):
        """Replace the oldest state and its factors by a quadratic prior.

        marg_vc carries the visual information of edges anchored on the
        marginalized frame (camera-tangent form); transient visual factors
        never participate.  Raises DanglingFactor if a persistent factor
        would still reference the removed state afterwards.
        """
        if oldest not in self.states:
            raise IndexOutOfWindow(f"epoch {oldest} not in window")
        consumed = [f for f in self.factors
                    if not f.transient and oldest in f.ids]
        leftover = [f for f in self.factors
                    if f.transient and oldest in f.ids]
        if leftover:
            raise DanglingFactor("transient visual factors still reference "
                                 "the state being marginalized")
        parts = list(consumed)
        if marg_vc is not None and len(marg_vc.indices) > 0:
            parts.append(visual_factor_from_constraint(
                marg_vc, self.states, self.params.cam_from_body))

        ids = [oldest]
        for f in parts:
            for i in f.ids:
                if i not in ids:
                    ids.append(i)
        slot = {i: k for k, i in enumerate(ids)}
        dim = STATE_DIM * len(ids)
        H = np.zeros((dim, dim))
        v = np.zeros(dim)
        for f in parts:
            Hf, vf = f.contribution(self.states)
            idx = np.concatenate([np.arange(STATE_DIM * slot[i],
                                            STATE_DIM * slot[i] + STATE_DIM)
                                  for i in f.ids])
            H[np.ix_(idx, idx)] += Hf
            v[idx] += vf

        m = slice(0, STATE_DIM)
        r = slice(STATE_DIM, dim)
        Hmm = H[m, m]
        Hrm = H[r, m]
        # eigendecomposition-based pseudo-inverse: unconstrained directions of
        # the removed state carry no information into the prior
        w, U = np.linalg.eigh(0.5 * (Hmm + Hmm.T))
        tol = max(w.max(), 0.0) * 1e-12 + 1e-300
        winv = np.where(w > tol, 1.0 / np.where(w > tol, w, 1.0), 0.0)
        Hmm_inv = U @ (winv[:, None] * U.T)
        H_new = H[r, r] - Hrm @ Hmm_inv @ Hrm.T
        v_new = v[r] - Hrm @ (Hmm_inv @ v[m])

        remaining = ids[1:]
        if remaining:
            prior = MarginalizationPrior(
                remaining, H_new, v_new, [self.states[i] for i in remaining])
            self.factors.append(prior)
        for f in consumed:
            self.factors.remove(f)
        del self.states[oldest]
        self.order.remove(oldest)
        for f in self.factors:
            if oldest in f.ids:
                raise DanglingFactor(f"factor {f} still references {oldest}")
        return self.prior()

    def prior(self) -> MarginalizationPrior | None:
        for f in reversed(self.factors):
            if isinstance(f, MarginalizationPrior):
                return f
        return None
