"""SE(2) pose graph for drift-corrected, globally referenced trajectories.

Nodes are keyframe poses chained by odometry factors; global prior factors
(from the converged filter posterior) anchor individual nodes to the map
frame.  Optimization is Gauss-Newton with a Levenberg fallback on the sum
of squared Mahalanobis residuals; with at least one prior the whole chain,
including the segment travelled before convergence, is pulled into the
global frame.
"""

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, identity
from scipy.sparse.linalg import spsolve

from .geometry import rot2, se2_between, se2_compose, wrap_angle

__all__ = ["GraphNode", "OdomFactor", "PriorFactor", "PoseGraph"]


@dataclass
class GraphNode:
    node_id: int
    pose: np.ndarray  # (3,) current estimate
    timestamp: float


@dataclass(frozen=True)
class OdomFactor:
    from_id: int
    to_id: int
    delta: np.ndarray  # (3,) measured relative pose
    information: np.ndarray  # (3, 3) SPD


@dataclass(frozen=True)
class PriorFactor:
    node_id: int
    pose: np.ndarray  # (3,) global anchor
    information: np.ndarray  # (3, 3) SPD


def _check_information(info):
    info = np.asarray(info, dtype=np.float64)
    if info.shape != (3, 3) or not np.allclose(info, info.T):
        raise ValueError("information matrix must be symmetric 3x3")
    if np.any(np.linalg.eigvalsh(info) <= 0):
        raise ValueError("information matrix must be positive definite")
    return info


class PoseGraph:
    def __init__(self):
        self.nodes = []
        self.odom_factors = []
        self.priors = []

    def __len__(self):
        return len(self.nodes)

    def add_node_with_odom(self, delta=None, information=None, timestamp=None):
        """Append a node at previous_pose * delta with its connecting factor.

        On an empty graph the node is created at the origin and delta is
        ignored (there is nothing to connect it to).
        """
        if timestamp is None:
            timestamp = float(len(self.nodes))
        if self.nodes and timestamp <= self.nodes[-1].timestamp:
            raise ValueError("timestamps must be strictly increasing")
        node_id = len(self.nodes)
        if node_id == 0:
            self.nodes.append(GraphNode(0, np.zeros(3), timestamp))
            return 0
        delta = np.asarray(delta, dtype=np.float64)
        information = np.eye(3) if information is None else _check_information(information)
        prev = self.nodes[-1].pose
        pose = se2_compose(prev, delta)
        self.nodes.append(GraphNode(node_id, pose, timestamp))
        self.odom_factors.append(OdomFactor(node_id - 1, node_id, delta.copy(), information))
        return node_id

    def add_prior(self, node_id, pose, information):
        if not (0 <= node_id < len(self.nodes)):
            raise KeyError(f"unknown node id {node_id}")
        self.priors.append(
            PriorFactor(node_id, np.asarray(pose, dtype=np.float64).copy(), _check_information(information))
        )

    def poses(self):
        return np.array([n.pose for n in self.nodes])

    def set_poses(self, poses):
        for node, pose in zip(self.nodes, poses):
            node.pose = np.array(pose, dtype=np.float64)

    # -- residuals ---------------------------------------------------------

    def _odom_residual(self, poses, f):
        pred = se2_between(poses[f.from_id], poses[f.to_id])
        r_delta_t = rot2(f.delta[2]).T
        e = np.empty(3)
        e[:2] = r_delta_t @ (pred[:2] - f.delta[:2])
        e[2] = wrap_angle(pred[2] - f.delta[2])
        return e

    def _prior_residual(self, poses, f):
        e = np.empty(3)
        e[:2] = rot2(f.pose[2]).T @ (poses[f.node_id][:2] - f.pose[:2])
        e[2] = wrap_angle(poses[f.node_id][2] - f.pose[2])
        return e

    def _odom_jacobians(self, poses, f):
        """d(residual)/d(x_i), d(residual)/d(x_j) for an odometry factor."""
        xi, xj = poses[f.from_id], poses[f.to_id]
        ci, si = np.cos(xi[2]), np.sin(xi[2])
        ri_t = np.array([[ci, si], [-si, ci]])
        dri_t = np.array([[-si, ci], [-ci, -si]])  # d(R_i^T)/d(theta_i)
        rd_t = rot2(f.delta[2]).T
        dt = xj[:2] - xi[:2]
        ja = np.zeros((3, 3))
        jb = np.zeros((3, 3))
        ja[:2, :2] = -rd_t @ ri_t
        ja[:2, 2] = rd_t @ (dri_t @ dt)
        ja[2, 2] = -1.0
        jb[:2, :2] = rd_t @ ri_t
        jb[2, 2] = 1.0
        return ja, jb

    def _prior_jacobian(self, f):
        j = np.zeros((3, 3))
        j[:2, :2] = rot2(f.pose[2]).T
        j[2, 2] = 1.0
        return j

    def total_cost(self, poses=None):
        poses = self.poses() if poses is None else poses
        cost = 0.0
        for f in self.odom_factors:
            e = self._odom_residual(poses, f)
            cost += float(e @ f.information @ e)
        for f in self.priors:
            e = self._prior_residual(poses, f)
            cost += float(e @ f.information @ e)
        return cost

    # -- optimization ------------------------------------------------------

    def optimize(self, max_iters=50, tol=1e-9):
        """Gauss-Newton (Levenberg fallback) over all node poses.

        Without any prior the first node is held fixed to pin the gauge.
        Accepted steps never increase the cost; returns True when the step
        norm drops below tol within the iteration budget.
        """
        n = len(self.nodes)
        if n == 0:
            return True
        fix_first = len(self.priors) == 0
        free_from = 1 if fix_first else 0
        n_free = n - free_from
        if n_free == 0:
            return True

        poses = self.poses()
        cost = self.total_cost(poses)
        for _ in range(max_iters):
            hess, grad = self._build_normal_equations(poses, free_from)
            step = None
            lam = 0.0
            while True:
                try:
                    h = hess if lam == 0.0 else hess + lam * identity(3 * n_free, format="csr")
                    dx = spsolve(h.tocsr(), -grad)
                    if not np.all(np.isfinite(dx)):
                        raise np.linalg.LinAlgError
                except (np.linalg.LinAlgError, RuntimeError):
                    lam = 1e-6 if lam == 0.0 else lam * 10.0
                    if lam > 1e8:
                        return False
                    continue
                candidate = poses.copy()
                candidate[free_from:] += dx.reshape(n_free, 3)
                candidate[:, 2] = wrap_angle(candidate[:, 2])
                new_cost = self.total_cost(candidate)
                if new_cost <= cost + 1e-15:
                    step = dx
                    poses = candidate
                    cost = new_cost
                    break
                lam = 1e-6 if lam == 0.0 else lam * 10.0
                if lam > 1e8:
                    self.set_poses(poses)
                    return False
            self.set_poses(poses)
            if np.linalg.norm(step) < tol:
                return True
        return False

    def _build_normal_equations(self, poses, free_from):
        n_free = len(self.nodes) - free_from
        grad = np.zeros(3 * n_free)
        rows, cols, vals = [], [], []
        blocks = {}

        def add_block(i, j, block):
            if i < free_from or j < free_from:
                return
            key = (i - free_from, j - free_from)
            if key in blocks:
                blocks[key] = blocks[key] + block
            else:
                blocks[key] = block.copy()

        def add_grad(i, vec):
            if i < free_from:
                return
            grad[3 * (i - free_from) : 3 * (i - free_from) + 3] += vec

        for f in self.odom_factors:
            e = self._odom_residual(poses, f)
            ja, jb = self._odom_jacobians(poses, f)
            wa = f.information @ ja
            wb = f.information @ jb
            add_block(f.from_id, f.from_id, ja.T @ wa)
            add_block(f.from_id, f.to_id, ja.T @ wb)
            add_block(f.to_id, f.from_id, jb.T @ wa)
            add_block(f.to_id, f.to_id, jb.T @ wb)
            add_grad(f.from_id, ja.T @ (f.information @ e))
            add_grad(f.to_id, jb.T @ (f.information @ e))
        for f in self.priors:
            e = self._prior_residual(poses, f)
            j = self._prior_jacobian(f)
            add_block(f.node_id, f.node_id, j.T @ f.information @ j)
            add_grad(f.node_id, j.T @ (f.information @ e))

        for (bi, bj), block in blocks.items():
            for a in range(3):
                for b in range(3):
                    rows.append(3 * bi + a)
                    cols.append(3 * bj + b)
                    vals.append(block[a, b])
        hess = coo_matrix((vals, (rows, cols)), shape=(3 * n_free, 3 * n_free))
        return hess.tocsr(), grad
