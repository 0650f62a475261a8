"""SE(3)/SO(3) algebra, pinhole camera model and dense reprojection.

Conventions used throughout the library:

- Frame poses are world-to-camera transforms ``T``: ``X_cam = T * X_world``.
- Tangent vectors (twists) are ordered ``[translational; rotational]``.
- Camera pose Jacobians are taken with respect to a LEFT perturbation,
  ``T <- exp(xi) * T``.  Body poses elsewhere use right perturbations; the
  factor graph converts between the two via the adjoint.
- Inverse depth parameterizes scene geometry: a pixel ``u`` with inverse
  depth ``lam`` lifts to the 3-D point ``K^-1 [u,1] / lam``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInverseDepth, NonPositiveDepth

DEPTH_MIN = 1e-3      # meters; smaller depths are masked in batched ops
LAMBDA_MIN = 1e-6     # 1/m; inverse-depth floor
SMALL_ANGLE = 1e-8    # rad; below this use series expansions
RENORM_CHAIN = 16     # quaternion renormalization period in compositions


# ---------------------------------------------------------------------------
# SO(3)
# ---------------------------------------------------------------------------

def skew(v):
    """3x3 cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp_matrix(theta):
    """Rotation matrix from a rotation vector (Rodrigues)."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    K = skew(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    s, c = np.sin(angle), np.cos(angle)
    return np.eye(3) + (s / angle) * K + ((1.0 - c) / angle**2) * (K @ K)


def so3_log_matrix(R):
    """Rotation vector from a rotation matrix (angle < pi)."""
    return quat_to_rotvec(quat_from_matrix(R))


def so3_right_jacobian(theta):
    """Right Jacobian J_r of SO(3) at rotation vector theta."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    K = skew(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    return (np.eye(3)
            - ((1.0 - np.cos(angle)) / a2) * K
            + ((angle - np.sin(angle)) / (a2 * angle)) * (K @ K))


def so3_right_jacobian_inv(theta):
    """Inverse of the right Jacobian of SO(3)."""
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    K = skew(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    a2 = angle * angle
    coeff = 1.0 / a2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * K + coeff * (K @ K)


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_multiply(q1, q2):
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R):
    """Quaternion (w,x,y,z) from a rotation matrix, Shepperd's method."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s,
                      0.25 * s,
                      (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s,
                      (R[0, 1] + R[1, 0]) / s,
                      0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s,
                      (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s,
                      0.25 * s])
    return q / np.linalg.norm(q)


def quat_from_rotvec(theta):
    theta = np.asarray(theta, dtype=float)
    angle = np.linalg.norm(theta)
    if angle < SMALL_ANGLE:
        # sin(a/2)/a ~ 1/2 - a^2/48
        half = 0.5 - angle * angle / 48.0
        q = np.concatenate(([np.cos(angle / 2.0)], half * theta))
    else:
        axis = theta / angle
        q = np.concatenate(([np.cos(angle / 2.0)], np.sin(angle / 2.0) * axis))
    return q / np.linalg.norm(q)


def quat_to_rotvec(q):
    w, v = q[0], np.asarray(q[1:], dtype=float)
    if w < 0:  # keep angle in [0, pi]
        w, v = -w, -v
    n = np.linalg.norm(v)
    if n < SMALL_ANGLE:
        return 2.0 * v / max(w, 1e-300)
    angle = 2.0 * np.arctan2(n, w)
    return angle * v / n


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------

class Transform:
    """Rigid transform stored as unit quaternion (w,x,y,z) + translation.

    Quaternions are renormalized after composition chains longer than
    RENORM_CHAIN operations to bound drift without per-op cost.  The rotation
    matrix is memoized; instances are treated as immutable.
    """

    __slots__ = ("q", "t", "_chain", "_R")

    def __init__(self, q=None, t=None, _chain=0):
        self.q = np.array([1.0, 0.0, 0.0, 0.0]) if q is None else np.asarray(q, dtype=float).copy()
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=float).copy()
        self._chain = _chain
        self._R = None

    @staticmethod
    def identity():
        return Transform()

    @classmethod
    def from_rotation_translation(cls, R, t):
        out = cls(quat_from_matrix(R), t)
        out._R = np.asarray(R, dtype=float).copy()
        return out

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls.from_rotation_translation(M[:3, :3], M[:3, 3])

    def rotation_matrix(self):
        if self._R is None:
            self._R = quat_to_matrix(self.q)
        return self._R

    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation_matrix()
        M[:3, 3] = self.t
        return M

    def compose(self, other: "Transform") -> "Transform":
        """self * other (apply other first)."""
        q = quat_multiply(self.q, other.q)
        t = self.rotation_matrix() @ other.t + self.t
        chain = max(self._chain, other._chain) + 1
        if chain >= RENORM_CHAIN:
            q = q / np.linalg.norm(q)
            chain = 0
        return Transform(q, t, chain)

    def __mul__(self, other):
        if isinstance(other, Transform):
            return self.compose(other)
        return NotImplemented

    def inverse(self) -> "Transform":
        qi = np.array([self.q[0], -self.q[1], -self.q[2], -self.q[3]])
        Rt = self.rotation_matrix().T
        out = Transform(qi, -(Rt @ self.t), self._chain)
        out._R = Rt
        return out

    def apply(self, pts):
        """Transform points, shape (3,) or (n,3)."""
        pts = np.asarray(pts, dtype=float)
        R = self.rotation_matrix()
        if pts.ndim == 1:
            return R @ pts + self.t
        return pts @ R.T + self.t

    def copy(self):
        out = Transform(self.q, self.t, self._chain)
        out._R = self._R
        return out

    def __repr__(self):
        return f"Transform(q={self.q}, t={self.t})"


def se3_exp(xi) -> Transform:
    """Exponential map from twist [rho; theta] to a rigid transform."""
    xi = np.asarray(xi, dtype=float)
    rho, theta = xi[:3], xi[3:]
    angle = np.linalg.norm(theta)
    K = skew(theta)
    if angle < SMALL_ANGLE:
        V = np.eye(3) + 0.5 * K + (K @ K) / 6.0
    else:
        a2 = angle * angle
        V = (np.eye(3)
             + ((1.0 - np.cos(angle)) / a2) * K
             + ((angle - np.sin(angle)) / (a2 * angle)) * (K @ K))
    return Transform(quat_from_rotvec(theta), V @ rho)


def se3_log(T: Transform):
    """Logarithm map; valid for rotation angles below pi."""
    theta = quat_to_rotvec(T.q)
    angle = np.linalg.norm(theta)
    K = skew(theta)
    if angle < SMALL_ANGLE:
        Vinv = np.eye(3) - 0.5 * K + (K @ K) / 12.0
    else:
        a2 = angle * angle
        coeff = 1.0 / a2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
        Vinv = np.eye(3) - 0.5 * K + coeff * (K @ K)
    return np.concatenate([Vinv @ T.t, theta])


def adjoint(T: Transform):
    """6x6 adjoint such that exp(Adj(T) xi) = T exp(xi) T^-1."""
    R = T.rotation_matrix()
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[:3, 3:] = skew(T.t) @ R
    A[3:, 3:] = R
    return A


# ---------------------------------------------------------------------------
# Pinhole camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; image dimensions must be divisible by the grid step 8."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width % 8 or self.height % 8:
            raise ValueError("image dimensions must be divisible by 8")


@dataclass(frozen=True)
class PixelGrid:
    """Grid-point pixel coordinates at cell centers of the 1/8-resolution grid."""

    coords: np.ndarray          # (n, 2) pixel coordinates (u, v)
    rows: int                   # H/8
    cols: int                   # W/8

    @classmethod
    def from_intrinsics(cls, K: Intrinsics) -> "PixelGrid":
        cached = _GRID_CACHE.get(K)
        if cached is not None:
            return cached
        rows, cols = K.height // 8, K.width // 8
        v, u = np.mgrid[0:rows, 0:cols].astype(float)
        # cell center of an 8x8 block: offset (8-1)/2 from its corner
        coords = np.stack([u.ravel() * 8.0 + 3.5, v.ravel() * 8.0 + 3.5], axis=1)
        grid = cls(coords=coords, rows=rows, cols=cols)
        _GRID_CACHE[K] = grid
        return grid

    @property
    def n(self) -> int:
        return self.rows * self.cols


_GRID_CACHE: dict = {}


def project(p, K: Intrinsics):
    """Project one camera-frame point to pixel coordinates."""
    p = np.asarray(p, dtype=float)
    if p[2] <= DEPTH_MIN:
        raise NonPositiveDepth(f"depth {p[2]:.3g} <= {DEPTH_MIN}")
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def backproject(u, lam, K: Intrinsics):
    """Lift pixel coordinates and inverse depth to a camera-frame point."""
    if lam < LAMBDA_MIN:
        raise InvalidInverseDepth(f"inverse depth {lam:.3g} < {LAMBDA_MIN}")
    u = np.asarray(u, dtype=float)
    return np.array([(u[0] - K.cx) / K.fx, (u[1] - K.cy) / K.fy, 1.0]) / lam


def _rays(coords, K: Intrinsics):
    """Unit-depth rays for grid coordinates, shape (n, 3)."""
    return np.stack([(coords[:, 0] - K.cx) / K.fx,
                     (coords[:, 1] - K.cy) / K.fy,
                     np.ones(len(coords))], axis=1)


def _reproject_core(grid, lambdas, Ti, Tj, K, with_jacobians):
    lambdas = np.asarray(lambdas, dtype=float)
    n = grid.n
    Tij = Tj.compose(Ti.inverse())
    R, t = Tij.rotation_matrix(), Tij.t

    lam_ok = lambdas >= LAMBDA_MIN
    lam_safe = np.where(lam_ok, lambdas, 1.0)
    Xi = _rays(grid.coords, K) / lam_safe[:, None]
    Xj = Xi @ R.T + t

    z_ok = Xj[:, 2] > DEPTH_MIN
    z = np.where(z_ok, Xj[:, 2], 1.0)
    u = K.fx * Xj[:, 0] / z + K.cx
    v = K.fy * Xj[:, 1] / z + K.cy
    in_bounds = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    valid = lam_ok & z_ok & in_bounds
    flow = np.where(valid[:, None], np.stack([u, v], axis=1), 0.0)
    if not with_jacobians:
        return flow, valid, None, None, None

    # P = d(pixel)/d(X_j), shape (n, 2, 3)
    P = np.zeros((n, 2, 3))
    P[:, 0, 0] = K.fx / z
    P[:, 0, 2] = -K.fx * Xj[:, 0] / z**2
    P[:, 1, 1] = K.fy / z
    P[:, 1, 2] = -K.fy * Xj[:, 1] / z**2

    # d(X_j)/d(xi_j) = [I, -skew(X_j)] for a left perturbation of T_j
    D_j = np.zeros((n, 3, 6))
    D_j[:, :, :3] = np.eye(3)
    D_j[:, 0, 4] = Xj[:, 2]
    D_j[:, 0, 5] = -Xj[:, 1]
    D_j[:, 1, 3] = -Xj[:, 2]
    D_j[:, 1, 5] = Xj[:, 0]
    D_j[:, 2, 3] = Xj[:, 1]
    D_j[:, 2, 4] = -Xj[:, 0]

    # d(X_j)/d(xi_i) = -R_ij [I, -skew(X_i)]
    D_i = np.zeros((n, 3, 6))
    D_i[:, :, :3] = np.eye(3)
    D_i[:, 0, 4] = Xi[:, 2]
    D_i[:, 0, 5] = -Xi[:, 1]
    D_i[:, 1, 3] = -Xi[:, 2]
    D_i[:, 1, 5] = Xi[:, 0]
    D_i[:, 2, 3] = Xi[:, 1]
    D_i[:, 2, 4] = -Xi[:, 0]
    D_i = -np.matmul(R, D_i)

    J_j = np.matmul(P, D_j)
    J_i = np.matmul(P, D_i)
    # d(X_j)/d(lam) = -R X_i / lam
    dX_dlam = -(Xi @ R.T) / lam_safe[:, None]
    J_lam = np.matmul(P, dX_dlam[:, :, None])[:, :, 0]

    J_i[~valid] = 0.0
    J_j[~valid] = 0.0
    J_lam[~valid] = 0.0
    return flow, valid, J_i, J_j, J_lam


def reproject(grid: PixelGrid, lambdas, Ti: Transform, Tj: Transform, K: Intrinsics):
    """Dense reprojection of source grid points into the target frame.

    Returns (flow, valid): flow is (n, 2) target pixel coordinates, valid is
    (n,) bool.  Pixels are invalid where the source inverse depth is below the
    floor, the target-frame depth is at or below DEPTH_MIN, or the projection
    leaves the image bounds.  Invalid rows of flow are zero.
    """
    flow, valid, *_ = _reproject_core(grid, lambdas, Ti, Tj, K, False)
    return flow, valid


def reprojection_jacobians(grid: PixelGrid, lambdas, Ti: Transform, Tj: Transform,
                           K: Intrinsics):
    """Analytic Jacobians of the dense reprojection.

    Returns (J_i, J_j, J_lam):
      J_i, J_j : (2n, 6) derivatives of the flattened flow with respect to
                 LEFT perturbations of the source/target world-to-camera poses;
      J_lam    : (n, 2) per-pixel diagonal blocks of the (2n x n)
                 block-diagonal derivative with respect to inverse depth.
    Rows of invalid pixels (per `reproject`) are exactly zero.
    """
    n = grid.n
    _, _, J_i, J_j, J_lam = _reproject_core(grid, lambdas, Ti, Tj, K, True)
    return J_i.reshape(2 * n, 6), J_j.reshape(2 * n, 6), J_lam


def reproject_with_jacobians(grid: PixelGrid, lambdas, Ti: Transform,
                             Tj: Transform, K: Intrinsics):
    """Flow, validity and Jacobians in one pass; J_i/J_j shaped (n, 2, 6)."""
    return _reproject_core(grid, lambdas, Ti, Tj, K, True)


def reproject_batch_with_jacobians(grid: PixelGrid, lambdas, Ti: Transform,
                                   Tj_list, K: Intrinsics):
    """Batched variant over edges sharing the source frame.

    Returns (flow, valid, J_i, J_j, J_lam) with a leading edge axis:
    flow (E,n,2), valid (E,n), J_i/J_j (E,n,2,6), J_lam (E,n,2).
    """
    lambdas = np.asarray(lambdas, dtype=float)
    n = grid.n
    E = len(Tj_list)
    Ti_inv = Ti.inverse()
    R_all = np.empty((E, 3, 3))
    t_all = np.empty((E, 3))
    for e, Tj in enumerate(Tj_list):
        Tij = Tj.compose(Ti_inv)
        R_all[e] = Tij.rotation_matrix()
        t_all[e] = Tij.t

    lam_ok = lambdas >= LAMBDA_MIN
    lam_safe = np.where(lam_ok, lambdas, 1.0)
    Xi = _rays(grid.coords, K) / lam_safe[:, None]            # (n, 3)
    Xj = np.matmul(R_all, Xi.T).transpose(0, 2, 1) + t_all[:, None, :]

    z_ok = Xj[..., 2] > DEPTH_MIN
    z = np.where(z_ok, Xj[..., 2], 1.0)
    u = K.fx * Xj[..., 0] / z + K.cx
    v = K.fy * Xj[..., 1] / z + K.cy
    in_bounds = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
    valid = lam_ok[None, :] & z_ok & in_bounds
    flow = np.where(valid[..., None], np.stack([u, v], axis=-1), 0.0)

    P = np.zeros((E, n, 2, 3))
    P[..., 0, 0] = K.fx / z
    P[..., 0, 2] = -K.fx * Xj[..., 0] / z**2
    P[..., 1, 1] = K.fy / z
    P[..., 1, 2] = -K.fy * Xj[..., 1] / z**2

    D_j = np.zeros((E, n, 3, 6))
    D_j[..., 0, 0] = 1.0
    D_j[..., 1, 1] = 1.0
    D_j[..., 2, 2] = 1.0
    D_j[..., 0, 4] = Xj[..., 2]
    D_j[..., 0, 5] = -Xj[..., 1]
    D_j[..., 1, 3] = -Xj[..., 2]
    D_j[..., 1, 5] = Xj[..., 0]
    D_j[..., 2, 3] = Xj[..., 1]
    D_j[..., 2, 4] = -Xj[..., 0]

    D_base = np.zeros((n, 3, 6))
    D_base[:, 0, 0] = 1.0
    D_base[:, 1, 1] = 1.0
    D_base[:, 2, 2] = 1.0
    D_base[:, 0, 4] = Xi[:, 2]
    D_base[:, 0, 5] = -Xi[:, 1]
    D_base[:, 1, 3] = -Xi[:, 2]
    D_base[:, 1, 5] = Xi[:, 0]
    D_base[:, 2, 3] = Xi[:, 1]
    D_base[:, 2, 4] = -Xi[:, 0]
    D_i = -np.matmul(R_all[:, None, :, :], D_base[None])      # (E, n, 3, 6)

    J_j = np.matmul(P, D_j)
    J_i = np.matmul(P, D_i)
    dX_dlam = -np.matmul(R_all, Xi.T).transpose(0, 2, 1) / lam_safe[None, :, None]
    J_lam = np.matmul(P, dX_dlam[..., None])[..., 0]

    bad = ~valid
    J_i[bad] = 0.0
    J_j[bad] = 0.0
    J_lam[bad] = 0.0
    return flow, valid, J_i, J_j, J_lam
