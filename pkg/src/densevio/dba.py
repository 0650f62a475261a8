"""Dense bundle adjustment on co-visibility edges.

Every edge (i -> j) reprojects the source frame's dense inverse-depth grid
into the target frame and penalizes the weighted difference to a measured
flow target.  Because each depth map only appears in edges anchored on its
own frame, the depth block of the normal equations is diagonal per anchor
and can be eliminated cheaply, leaving a pose-only quadratic constraint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import Degenerate, IndexOutOfWindow, MixedAnchor
from .liegeom import (LAMBDA_MIN, Intrinsics, PixelGrid, Transform, se3_exp,
                      reproject, reproject_batch_with_jacobians)

SCHUR_DAMPING = 1e-4   # added to every depth-diagonal entry before inversion


@dataclass
class DepthMap:
    """Per-keyframe inverse-depth grid at 1/8 image resolution."""

    keyframe: int
    lam: np.ndarray            # (n,) inverse depths, clamped to >= LAMBDA_MIN

    def __post_init__(self):
        self.lam = np.maximum(np.asarray(self.lam, dtype=float), LAMBDA_MIN)

    def updated(self, delta):
        return DepthMap(self.keyframe, np.maximum(self.lam + delta, LAMBDA_MIN))


@dataclass
class FlowMeasurement:
    """Measured flow target and per-pixel weights for one edge."""

    source: int
    target: int
    target_flow: np.ndarray    # (n, 2) pixels
    weight: np.ndarray         # (n, 2) nonnegative, zero where mask is false
    valid_mask: np.ndarray     # (n,) bool

    def __post_init__(self):
        self.target_flow = np.asarray(self.target_flow, dtype=float)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        w = np.asarray(self.weight, dtype=float)
        if (w < 0).any():
            raise ValueError("flow weights must be nonnegative")
        self.weight = np.where(self.valid_mask[:, None], w, 0.0)


@dataclass
class EdgeBlocks:
    """Linearized normal-equation blocks of a single edge."""

    source: int
    target: int
    B_ii: np.ndarray           # 6x6
    B_ij: np.ndarray           # 6x6
    B_jj: np.ndarray           # 6x6
    E_ii: np.ndarray           # 6xn  (source pose x depth)
    E_ij: np.ndarray           # 6xn  (target pose x depth)
    C_ii: np.ndarray           # (n,) diagonal of the depth block
    v_ii: np.ndarray           # (6,)
    v_ij: np.ndarray           # (6,)
    z_ii: np.ndarray           # (n,)
    residual: np.ndarray = field(repr=False, default=None)   # (n, 2), masked
    weight: np.ndarray = field(repr=False, default=None)     # (n, 2), masked


@dataclass
class VisualConstraint:
    """Depth-eliminated quadratic pose constraint 0.5 x'Hx - x'v."""

    indices: tuple             # window pose ids the blocks refer to
    H: np.ndarray              # (6K, 6K) symmetric
    v: np.ndarray              # (6K,)


@dataclass
class FrameSystem:
    """Stacked normal equations of all edges sharing one anchor frame."""

    anchor: int
    pose_ids: tuple            # anchor first, then sorted targets
    B: np.ndarray              # (6P, 6P)
    E: np.ndarray              # (6P, n)
    C: np.ndarray              # (n,)
    v: np.ndarray              # (6P,)
    z: np.ndarray              # (n,)


def linearize_edges(meas_list, Ti: Transform, Tj_list, depth: DepthMap,
                    K: Intrinsics) -> list[EdgeBlocks]:
    """Linearize a bundle of edges sharing the source frame in one batch."""
    grid = PixelGrid.from_intrinsics(K)
    n = grid.n
    ne = len(meas_list)
    flow, valid, Ji, Jj, Jlam = reproject_batch_with_jacobians(
        grid, depth.lam, Ti, Tj_list, K)
    masks = np.stack([m.valid_mask for m in meas_list])
    weights = np.stack([m.weight for m in meas_list])
    targets = np.stack([m.target_flow for m in meas_list])

    valid = valid & masks
    w = np.where(valid[..., None], weights, 0.0)
    r = np.where(valid[..., None], targets - flow, 0.0)
    bad = ~valid
    Ji[bad] = 0.0
    Jj[bad] = 0.0
    Jlam[bad] = 0.0

    Jp = np.concatenate([Ji, Jj], axis=3).reshape(ne, 2 * n, 12)
    w_flat = w.reshape(ne, 2 * n, 1)
    Hp = np.matmul(Jp.transpose(0, 2, 1), w_flat * Jp)        # (E, 12, 12)
    wJlam = w * Jlam
    wr = w * r
    E_blk = (Jp.reshape(ne, n, 2, 12) * wJlam[..., None]).sum(axis=2)
    C = (wJlam * Jlam).sum(axis=-1)                           # (E, n)
    vp = np.matmul(Jp.transpose(0, 2, 1),
                   wr.reshape(ne, 2 * n, 1))[..., 0]          # (E, 12)
    z = (Jlam * wr).sum(axis=-1)

    out = []
    for e, m in enumerate(meas_list):
        out.append(EdgeBlocks(m.source, m.target,
                              Hp[e, :6, :6], Hp[e, :6, 6:], Hp[e, 6:, 6:],
                              E_blk[e, :, :6].T.copy(),
                              E_blk[e, :, 6:].T.copy(), C[e],
                              vp[e, :6], vp[e, 6:], z[e],
                              residual=r[e], weight=w[e]))
    return out


def linearize_edge(meas: FlowMeasurement, Ti: Transform, Tj: Transform,
                   depth: DepthMap, K: Intrinsics) -> EdgeBlocks:
    """Build the 2x2(+depth) Hessian blocks of one edge at the current states."""
    return linearize_edges([meas], Ti, [Tj], depth, K)[0]


def assemble_frame_system(anchor: int, edges: list[EdgeBlocks]) -> FrameSystem:
    """Positionally stack/sum edge blocks sharing the anchor as source frame."""
    if any(e.source != anchor for e in edges):
        raise MixedAnchor(f"edges must all be anchored on frame {anchor}")
    if not edges:
        raise ValueError("empty edge list")
    n = len(edges[0].C_ii)
    targets = sorted({e.target for e in edges})
    pose_ids = (anchor,) + tuple(targets)
    slot = {p: k for k, p in enumerate(pose_ids)}
    P = len(pose_ids)

    B = np.zeros((6 * P, 6 * P))
    E = np.zeros((6 * P, n))
    C = np.zeros(n)
    v = np.zeros(6 * P)
    z = np.zeros(n)
    for e in edges:
        j = slot[e.target]
        B[:6, :6] += e.B_ii
        B[:6, 6 * j:6 * j + 6] += e.B_ij
        B[6 * j:6 * j + 6, :6] += e.B_ij.T
        B[6 * j:6 * j + 6, 6 * j:6 * j + 6] += e.B_jj
        E[:6] += e.E_ii
        E[6 * j:6 * j + 6] += e.E_ij
        C += e.C_ii
        v[:6] += e.v_ii
        v[6 * j:6 * j + 6] += e.v_ij
        z += e.z_ii
    return FrameSystem(anchor, pose_ids, B, E, C, v, z)


def schur_eliminate_depth(system: FrameSystem,
                          damping: float = SCHUR_DAMPING) -> VisualConstraint:
    """Eliminate the diagonal depth block: H = B - E C^-1 E', v = v - E C^-1 z."""
    Cd = system.C + damping
    Einv = system.E / Cd
    H = system.B - Einv @ system.E.T
    v = system.v - Einv @ system.z
    return VisualConstraint(system.pose_ids, 0.5 * (H + H.T), v)


def accumulate_visual_constraint(constraints: list[VisualConstraint],
                                 window_poses) -> VisualConstraint:
    """Index-aligned sum of constraints over the full window pose list."""
    window_poses = tuple(window_poses)
    slot = {p: k for k, p in enumerate(window_poses)}
    K = len(window_poses)
    H = np.zeros((6 * K, 6 * K))
    v = np.zeros(6 * K)
    for c in constraints:
        try:
            rows = [slot[p] for p in c.indices]
        except KeyError as exc:
            raise IndexOutOfWindow(f"pose {exc.args[0]} not in window") from None
        for a, ka in enumerate(rows):
            v[6 * ka:6 * ka + 6] += c.v[6 * a:6 * a + 6]
            for b, kb in enumerate(rows):
                H[6 * ka:6 * ka + 6, 6 * kb:6 * kb + 6] += \
                    c.H[6 * a:6 * a + 6, 6 * b:6 * b + 6]
    return VisualConstraint(window_poses, H, v)


def update_depths(system: FrameSystem, pose_increments, depth: DepthMap,
                  damping: float = SCHUR_DAMPING):
    """Back-substitute depth increments for given stacked pose increments.

    pose_increments is (P, 6) or (6P,) in the stacked order of the frame
    system (anchor first).  Returns (new clamped DepthMap, raw increment).
    """
    xi = np.asarray(pose_increments, dtype=float).reshape(-1)
    if xi.size != system.E.shape[0]:
        raise ValueError("pose increment size does not match stacked system")
    delta = (system.z - system.E.T @ xi) / (system.C + damping)
    return depth.updated(delta), delta


def marginal_visual_constraint(edges: list[EdgeBlocks], frame: int,
                               damping: float = SCHUR_DAMPING) -> VisualConstraint:
    """Visual information carried by edges anchored on a marginalized frame.

    Edges that reproject newer frames INTO `frame` must not be passed here;
    dropping them keeps the window sparse at the cost of a deliberate
    information loss.
    """
    anchored = [e for e in edges if e.source == frame]
    if len(anchored) != len(edges):
        raise MixedAnchor("marginal constraint takes only edges sourced at the "
                          "marginalized frame")
    if not anchored:
        return VisualConstraint((), np.zeros((0, 0)), np.zeros(0))
    return schur_eliminate_depth(assemble_frame_system(frame, anchored), damping)


def weighted_flow_cost(measurements, poses: dict, depths: dict, K: Intrinsics):
    """Total weighted squared flow residual at the given states."""
    grid = PixelGrid.from_intrinsics(K)
    cost = 0.0
    for m in measurements:
        flow, valid = reproject(grid, depths[m.source].lam, poses[m.source],
                                poses[m.target], K)
        valid = valid & m.valid_mask
        r = np.where(valid[:, None], m.target_flow - flow, 0.0)
        w = np.where(valid[:, None], m.weight, 0.0)
        cost += float(np.sum(w * r * r))
    return cost


def _camera_center(T: Transform):
    return -(T.rotation_matrix().T @ T.t)


def _rescale_about_first(poses: dict, depths: dict, pose_ids, factor: float):
    """Similarity re-gauge: scale the scene about the first camera center."""
    c0 = _camera_center(poses[pose_ids[0]])
    for pid in pose_ids:
        T = poses[pid]
        R = T.rotation_matrix()
        c = _camera_center(T)
        c_new = c0 + (c - c0) / factor
        poses[pid] = Transform.from_rotation_translation(R, -(R @ c_new))
    for kf in depths:
        depths[kf] = DepthMap(kf, depths[kf].lam * factor)


def solve_visual_only(pose_ids, poses: dict, depths: dict, measurements,
                      K: Intrinsics, iterations: int = 10,
                      damping: float = SCHUR_DAMPING):
    """Alternating Gauss-Newton over poses (Schur-reduced) and depths.

    Gauge fixing: the first pose is frozen and the mean log inverse depth of
    the first keyframe is held at its initial value by re-gauging after every
    accepted step.  Raises Degenerate if the reduced Hessian is rank-deficient
    beyond the single remaining scale gauge.
    """
    pose_ids = tuple(pose_ids)
    if len(pose_ids) < 2 or not measurements:
        raise Degenerate("need at least two keyframes and one edge")
    poses = {p: poses[p].copy() for p in pose_ids}
    depths = {k: DepthMap(k, d.lam.copy()) for k, d in depths.items()}
    anchor_of = sorted({m.source for m in measurements})
    log_gauge = float(np.mean(np.log(depths[pose_ids[0]].lam))) \
        if pose_ids[0] in depths else None

    costs = [weighted_flow_cost(measurements, poses, depths, K)]
    for _ in range(iterations):
        systems = {}
        for a in anchor_of:
            bundle = [m for m in measurements if m.source == a]
            blocks = linearize_edges(bundle, poses[a],
                                     [poses[m.target] for m in bundle],
                                     depths[a], K)
            systems[a] = assemble_frame_system(a, blocks)
        constraints = [schur_eliminate_depth(s, damping) for s in systems.values()]
        acc = accumulate_visual_constraint(constraints, pose_ids)
        H, v = acc.H.copy(), acc.v.copy()

        # scale gauge: penalize the first-order change of the first keyframe's
        # mean log inverse depth, a linear function of the pose increment via
        # the depth back-substitution
        allowed_null = 1
        if pose_ids[0] in systems:
            sys0 = systems[pose_ids[0]]
            coef = 1.0 / ((sys0.C + damping) * depths[pose_ids[0]].lam)
            g = np.zeros(6 * len(pose_ids))
            for a, p in enumerate(sys0.pose_ids):
                k = pose_ids.index(p)
                g[6 * k:6 * k + 6] = sys0.E[6 * a:6 * a + 6] @ coef
            s0 = float(sys0.z @ coef)
            rho = np.trace(H) + 1.0
            H += rho * np.outer(g, g)
            v += rho * s0 * g
            allowed_null = 0

        # freeze the first pose: drop its 6 rows/cols
        Hr = H[6:, 6:]
        vr = v[6:]
        w_eig, V = np.linalg.eigh(Hr)
        tol = max(w_eig[-1], 1e-300) * 1e-10
        null = int(np.sum(w_eig < tol))
        if null > allowed_null:
            raise Degenerate(f"reduced Hessian has {null} null directions "
                             "beyond the gauge freedoms")
        inv = np.where(w_eig > tol, 1.0 / np.where(w_eig > tol, w_eig, 1.0), 0.0)
        xi_r = V @ (inv * (V.T @ vr))
        xi = np.concatenate([np.zeros(6), xi_r])

        # full-step depth increments; the line search scales pose and depth
        # parts of the joint Gauss-Newton direction together
        delta_lam = {}
        for a, sys_a in systems.items():
            xi_stack = np.concatenate([xi[6 * pose_ids.index(p):
                                          6 * pose_ids.index(p) + 6]
                                       for p in sys_a.pose_ids])
            _, delta_lam[a] = update_depths(sys_a, xi_stack, depths[a], damping)

        step = 1.0
        accepted = False
        for _ in range(8):
            trial_poses = dict(poses)
            for k, pid in enumerate(pose_ids):
                trial_poses[pid] = se3_exp(step * xi[6 * k:6 * k + 6]).compose(poses[pid])
            trial_depths = dict(depths)
            for a in systems:
                trial_depths[a] = depths[a].updated(step * delta_lam[a])
            cost = weighted_flow_cost(measurements, trial_poses, trial_depths, K)
            if cost <= costs[-1] * (1 + 1e-12):
                poses, depths = trial_poses, trial_depths
                costs.append(cost)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        if log_gauge is not None:
            m = float(np.mean(np.log(depths[pose_ids[0]].lam)))
            factor = np.exp(log_gauge - m)
            if abs(np.log(factor)) > 1e-12:
                _rescale_about_first(poses, depths, pose_ids, factor)
                costs[-1] = weighted_flow_cost(measurements, poses, depths, K)
        if np.max(np.abs(xi)) * step < 1e-10:
            break
    return poses, depths, costs
