"""Independent reference implementations used to check the library paths.

Everything here is deliberately naive: dense matrices, brute-force stacking
and direct solves.  The oracles never call the block-wise production code
they are used to verify.
"""

import numpy as np

from densevio import liegeom as lg
from densevio.dba import DepthMap, FlowMeasurement, FrameSystem


def dense_edge_normal_equations(meas, Ti, Tj, depth, K):
    """J'WJ and J'Wr of one edge built as one dense matrix product.

    Column order: [xi_i (6), xi_j (6), dlam (n)].
    """
    grid = lg.PixelGrid.from_intrinsics(K)
    n = grid.n
    flow, valid = lg.reproject(grid, depth.lam, Ti, Tj, K)
    valid = valid & meas.valid_mask
    Ji, Jj, Jlam = lg.reprojection_jacobians(grid, depth.lam, Ti, Tj, K)

    J = np.zeros((2 * n, 12 + n))
    J[:, :6] = Ji
    J[:, 6:12] = Jj
    for k in range(n):
        J[2 * k:2 * k + 2, 12 + k] = Jlam[k]
    J[np.repeat(~valid, 2)] = 0.0

    w = np.where(valid[:, None], meas.weight, 0.0).reshape(-1)
    r = np.where(valid[:, None], meas.target_flow - flow, 0.0).reshape(-1)
    H = J.T @ (w[:, None] * J)
    g = J.T @ (w * r)
    return H, g


def dense_multi_edge_system(measurements, poses, depths, K, pose_ids):
    """Dense normal equations over all window poses and all depth maps.

    Column order: 6 per pose in pose_ids order, then the depth maps of each
    anchor frame in sorted anchor order.
    """
    anchors = sorted({m.source for m in measurements})
    grid = lg.PixelGrid.from_intrinsics(K)
    n = grid.n
    P = len(pose_ids)
    slot = {p: k for k, p in enumerate(pose_ids)}
    dz = {a: 6 * P + i * n for i, a in enumerate(anchors)}
    dim = 6 * P + n * len(anchors)

    H = np.zeros((dim, dim))
    g = np.zeros(dim)
    for m in measurements:
        He, ge = dense_edge_normal_equations(m, poses[m.source], poses[m.target],
                                             depths[m.source], K)
        cols = ([6 * slot[m.source] + k for k in range(6)]
                + [6 * slot[m.target] + k for k in range(6)]
                + [dz[m.source] + k for k in range(n)])
        cols = np.array(cols)
        H[np.ix_(cols, cols)] += He
        g[cols] += ge
    return H, g, anchors


def random_block_instance(rng, n_poses, n_depth):
    """Random well-conditioned stacked system with a diagonal depth block.

    Built from an explicit dense Jacobian with one independent depth column
    per pixel row pair, so the depth block is diagonal by construction.
    """
    rows = 2 * n_depth
    Jp = rng.normal(size=(rows, 6 * n_poses))
    Jd = np.zeros((rows, n_depth))
    for k in range(n_depth):
        Jd[2 * k:2 * k + 2, k] = rng.normal(size=2) + np.array([2.0, -2.0])
    w = rng.uniform(0.5, 2.0, size=rows)
    r = rng.normal(size=rows)

    J = np.hstack([Jp, Jd])
    H = J.T @ (w[:, None] * J)
    gv = J.T @ (w * r)
    B = H[:6 * n_poses, :6 * n_poses]
    E = H[:6 * n_poses, 6 * n_poses:]
    C = np.diag(H[6 * n_poses:, 6 * n_poses:]).copy()
    v = gv[:6 * n_poses]
    z = gv[6 * n_poses:]
    return FrameSystem(anchor=0, pose_ids=tuple(range(n_poses)),
                       B=B, E=E, C=C, v=v, z=z)


def solve_full_dense(system, damping):
    """Direct solve of the full stacked system [[B,E],[E',C]] with damped C."""
    P6 = system.B.shape[0]
    n = len(system.C)
    M = np.zeros((P6 + n, P6 + n))
    M[:P6, :P6] = system.B
    M[:P6, P6:] = system.E
    M[P6:, :P6] = system.E.T
    M[P6:, P6:] = np.diag(system.C + damping)
    sol = np.linalg.solve(M, np.concatenate([system.v, system.z]))
    return sol[:P6], sol[P6:]


def make_two_view_scene(rng, K, lam_range=(0.2, 0.6), baseline=0.3):
    """Ground-truth two-view setup looking at a random near-plane of points."""
    grid = lg.PixelGrid.from_intrinsics(K)
    lam = rng.uniform(*lam_range, size=grid.n)
    Ti = lg.Transform.identity()
    Tj = lg.se3_exp(np.concatenate([
        baseline * rng.normal(size=3) * [1.0, 0.5, 0.2],
        0.05 * rng.normal(size=3),
    ]))
    return grid, lam, Ti, Tj


def exact_flow_measurement(source, target, poses, depths, K, weight=1.0):
    """Flow target equal to the ground-truth reprojection with uniform weight."""
    grid = lg.PixelGrid.from_intrinsics(K)
    flow, valid = lg.reproject(grid, depths[source].lam, poses[source],
                               poses[target], K)
    w = np.full((grid.n, 2), weight) * valid[:, None]
    return FlowMeasurement(source, target, flow, w, valid)


def perturbed_pose(rng, T, trans=0.01, rot=np.deg2rad(0.5)):
    xi = np.concatenate([
        trans * rng.normal(size=3) / np.sqrt(3),
        rot * rng.normal(size=3) / np.sqrt(3),
    ])
    return lg.se3_exp(xi).compose(T)


def pose_rmse(poses_a, poses_b, ids):
    errs = []
    for p in ids:
        d = poses_a[p].compose(poses_b[p].inverse())
        errs.append(np.linalg.norm(lg.se3_log(d)))
    return float(np.sqrt(np.mean(np.square(errs))))
