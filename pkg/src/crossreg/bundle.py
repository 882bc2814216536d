"""Pose-anchored bundle adjustment.

Minimizes::

    sum_obs |u_ij - f(X_j | R_i, C_i)|^2  +  lam * sum_i |C_i - C_i^reg|^2

over camera rotations, camera centers and points with Levenberg-Marquardt.
Cameras are pinhole, ``x_cam = R (X - C)``; rotations are updated on the
left by ``exp([dw]x)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .geometry import axis_angle_matrix, skew

log = logging.getLogger(__name__)

OBS_DTYPE = np.dtype([("pose", "<i8"), ("point", "<i8"), ("u", "<f8"), ("v", "<f8")])


@dataclass
class CameraPose:
    rotation: np.ndarray  # world -> camera
    center: np.ndarray
    focal: float
    principal_point: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if np.max(np.abs(self.rotation.T @ self.rotation - np.eye(3))) > 1e-9:
            raise ValueError("camera rotation must be orthonormal")

    @property
    def translation(self) -> np.ndarray:
        return -self.rotation @ self.center


class BehindCamera(ValueError):
    pass


def project_point(pose: CameraPose, X) -> np.ndarray:
    xc = pose.rotation @ (np.asarray(X, dtype=np.float64) - pose.center)
    if xc[2] <= 0:
        raise BehindCamera("point has non-positive depth")
    return pose.focal * xc[:2] / xc[2] + pose.principal_point


def backproject(pose: CameraPose, u, depth: float) -> np.ndarray:
    xn = (np.asarray(u, dtype=np.float64) - pose.principal_point) / pose.focal
    xc = np.array([xn[0], xn[1], 1.0]) * depth
    return pose.rotation.T @ xc + pose.center


def so3_log(R) -> np.ndarray:
    c = float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
    th = math.acos(c)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if th < 1e-8:
        return 0.5 * w
    return th / (2.0 * math.sin(th)) * w


def _left_jacobian_inv(phi) -> np.ndarray:
    th = float(np.linalg.norm(phi))
    K = skew(phi)
    if th < 1e-8:
        return np.eye(3) - 0.5 * K
    coef = 1.0 / th**2 - (1.0 + math.cos(th)) / (2.0 * th * math.sin(th))
    return np.eye(3) - 0.5 * K + coef * (K @ K)


@dataclass
class BAProblem:
    poses: list[CameraPose]
    points: np.ndarray
    observations: np.ndarray
    anchors: np.ndarray  # registered camera centers
    lam: float = 20.0
    anchor_rotations: np.ndarray | None = None
    rotation_weight: float = 0.0

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.anchors = np.asarray(self.anchors, dtype=np.float64).reshape(-1, 3)
        self.observations = np.asarray(self.observations).astype(OBS_DTYPE)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if len(self.anchors) != len(self.poses):
            raise ValueError("one anchor per pose required")
        obs = self.observations
        if len(obs) and (
            obs["pose"].min() < 0 or obs["pose"].max() >= len(self.poses)
            or obs["point"].min() < 0 or obs["point"].max() >= len(self.points)
        ):
            raise ValueError("observation references an unknown pose or point")
        if self.rotation_weight > 0 and self.anchor_rotations is None:
            self.anchor_rotations = np.array([p.rotation for p in self.poses])


@dataclass
class BAState:
    rotations: np.ndarray  # (P, 3, 3)
    centers: np.ndarray  # (P, 3)
    points: np.ndarray  # (M, 3)

    @classmethod
    def from_problem(cls, problem: BAProblem) -> "BAState":
        return cls(
            np.array([p.rotation for p in problem.poses]),
            np.array([p.center for p in problem.poses]),
            problem.points.copy(),
        )

    def retract(self, dpose: np.ndarray, dpts: np.ndarray) -> "BAState":
        dpose = dpose.reshape(-1, 6)
        R = np.array([axis_angle_matrix(w, np.linalg.norm(w)) @ Ri if np.linalg.norm(w) > 0 else Ri
                      for w, Ri in zip(dpose[:, :3], self.rotations)])
        return BAState(R, self.centers + dpose[:, 3:], self.points + dpts.reshape(-1, 3))


def _camera_coords(problem: BAProblem, state: BAState):
    obs = problem.observations
    R = state.rotations[obs["pose"]]
    diff = state.points[obs["point"]] - state.centers[obs["pose"]]
    return np.einsum("nij,nj->ni", R, diff), R


def reprojection_residuals(problem: BAProblem, state: BAState) -> np.ndarray:
    """(n_obs, 2) predicted minus observed pixels."""
    obs = problem.observations
    xc, _ = _camera_coords(problem, state)
    f = np.array([p.focal for p in problem.poses])[obs["pose"]]
    pp = np.array([p.principal_point for p in problem.poses])[obs["pose"]]
    pred = f[:, None] * xc[:, :2] / xc[:, 2:3] + pp
    return pred - np.column_stack([obs["u"], obs["v"]])


def residuals(problem: BAProblem, state: BAState) -> np.ndarray:
    r = [reprojection_residuals(problem, state).ravel()]
    r.append((math.sqrt(problem.lam) * (state.centers - problem.anchors)).ravel())
    if problem.rotation_weight > 0:
        sw = math.sqrt(problem.rotation_weight)
        r.append(np.concatenate([
            sw * so3_log(R @ Ra.T) for R, Ra in zip(state.rotations, problem.anchor_rotations)
        ]))
    return np.concatenate(r)


def objective(problem: BAProblem, state: BAState) -> float:
    r = residuals(problem, state)
    return float(r @ r)


@dataclass
class JacobianBlocks:
    """Block-sparse Jacobian.

    ``pose[k]`` (2x6) and ``point[k]`` (2x3) belong to observation ``k``;
    ``anchor[i]`` (3x6) is the anchor residual of pose ``i`` (and ``rot[i]``
    the optional rotation-anchor block).
    """

    pose: np.ndarray
    point: np.ndarray
    anchor: np.ndarray
    rot: np.ndarray | None = None


def ba_jacobian(problem: BAProblem, state: BAState) -> JacobianBlocks:
    obs = problem.observations
    xc, R = _camera_coords(problem, state)
    f = np.array([p.focal for p in problem.poses])[obs["pose"]]
    z = xc[:, 2]
    dudx = np.zeros((len(obs), 2, 3))
    dudx[:, 0, 0] = f / z
    dudx[:, 1, 1] = f / z
    dudx[:, 0, 2] = -f * xc[:, 0] / z**2
    dudx[:, 1, 2] = -f * xc[:, 1] / z**2
    # d xc / d dw = -[xc]x
    sk = np.zeros((len(obs), 3, 3))
    sk[:, 0, 1], sk[:, 0, 2] = -xc[:, 2], xc[:, 1]
    sk[:, 1, 0], sk[:, 1, 2] = xc[:, 2], -xc[:, 0]
    sk[:, 2, 0], sk[:, 2, 1] = -xc[:, 1], xc[:, 0]
    jp = np.empty((len(obs), 2, 6))
    jp[:, :, :3] = -dudx @ sk
    jp[:, :, 3:] = -dudx @ R
    jx = dudx @ R
    P = len(problem.poses)
    anchor = np.zeros((P, 3, 6))
    anchor[:, :, 3:] = math.sqrt(problem.lam) * np.eye(3)
    rot = None
    if problem.rotation_weight > 0:
        sw = math.sqrt(problem.rotation_weight)
        rot = np.zeros((P, 3, 6))
        for i, (Ri, Ra) in enumerate(zip(state.rotations, problem.anchor_rotations)):
            rot[i, :, :3] = sw * _left_jacobian_inv(so3_log(Ri @ Ra.T))
    return JacobianBlocks(jp, jx, anchor, rot)


def dense_jacobian(problem: BAProblem, state: BAState, blocks: JacobianBlocks | None = None) -> np.ndarray:
    """Full matrix, columns ordered [pose 0 (dw, dC), ..., point 0, ...]."""
    blocks = blocks or ba_jacobian(problem, state)
    obs = problem.observations
    P, M = len(problem.poses), len(state.points)
    rows = 2 * len(obs) + 3 * P + (3 * P if blocks.rot is not None else 0)
    J = np.zeros((rows, 6 * P + 3 * M))
    for k, o in enumerate(obs):
        i, j = int(o["pose"]), int(o["point"])
        J[2 * k : 2 * k + 2, 6 * i : 6 * i + 6] = blocks.pose[k]
        J[2 * k : 2 * k + 2, 6 * P + 3 * j : 6 * P + 3 * j + 3] = blocks.point[k]
    base = 2 * len(obs)
    for i in range(P):
        J[base + 3 * i : base + 3 * i + 3, 6 * i : 6 * i + 6] = blocks.anchor[i]
    if blocks.rot is not None:
        base += 3 * P
        for i in range(P):
            J[base + 3 * i : base + 3 * i + 3, 6 * i : 6 * i + 6] = blocks.rot[i]
    return J


def _sparse_jacobian(problem: BAProblem, state: BAState, blocks: JacobianBlocks) -> sp.csr_matrix:
    obs = problem.observations
    P, M = len(problem.poses), len(state.points)
    n_obs = len(obs)
    r_obs = np.arange(2 * n_obs).reshape(n_obs, 2)
    rows = [np.repeat(r_obs, 6, axis=1).ravel(), np.repeat(r_obs, 3, axis=1).ravel()]
    cols = [
        (6 * obs["pose"][:, None, None] + np.arange(6)[None, None, :]).repeat(2, axis=1).ravel(),
        (6 * P + 3 * obs["point"][:, None, None] + np.arange(3)[None, None, :]).repeat(2, axis=1).ravel(),
    ]
    vals = [blocks.pose.ravel(), blocks.point.ravel()]
    base = 2 * n_obs
    extra = [blocks.anchor] + ([blocks.rot] if blocks.rot is not None else [])
    for blk in extra:
        r = base + np.arange(3 * P).reshape(P, 3)
        rows.append(np.repeat(r, 6, axis=1).ravel())
        cols.append(np.tile(6 * np.arange(P)[:, None, None] + np.arange(6), (1, 3, 1)).ravel())
        vals.append(blk.ravel())
        base += 3 * P
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(base, 6 * P + 3 * M),
    )


def _solve_dense(J, r, mu):
    A = J.T @ J
    g = J.T @ r
    A[np.diag_indices_from(A)] += mu * (np.diag(A) + 1e-12)
    return np.linalg.solve(A, -g)


def _solve_schur(J: sp.csr_matrix, r, mu, n_pose_params):
    A = (J.T @ J).tocsr()
    g = J.T @ r
    d = A.diagonal()
    A = A + sp.diags(mu * (d + 1e-12))
    n = n_pose_params
    U = A[:n, :n].toarray()
    W = A[:n, n:]
    V = A[n:, n:]
    m = V.shape[0] // 3
    Vb = np.zeros((m, 3, 3))
    Vc = V.tocoo()
    Vb[Vc.row // 3, Vc.row % 3, Vc.col % 3] = Vc.data
    Vinv = sp.block_diag(list(np.linalg.inv(Vb)), format="csr")
    WVinv = W @ Vinv
    S = U - (WVinv @ W.T).toarray()
    rhs = -g[:n] + WVinv @ g[n:]
    dp = np.linalg.solve(S, rhs)
    dx = Vinv @ (-g[n:] - W.T @ dp)
    return np.concatenate([dp, dx])


@dataclass
class BAReport:
    initial_rms: float
    final_rms: float
    initial_objective: float
    final_objective: float
    iterations: int
    converged: bool
    reason: str
    objective_trace: list[float]

    def to_json(self) -> dict:
        return {
            "initial_rms_px": self.initial_rms,
            "final_rms_px": self.final_rms,
            "initial_objective": self.initial_objective,
            "final_objective": self.final_objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "reason": self.reason,
        }


def reprojection_rms(problem: BAProblem, state: BAState) -> float:
    r = reprojection_residuals(problem, state)
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1)))) if len(r) else 0.0


def constrained_bundle_adjust(
    problem: BAProblem,
    max_iters: int = 100,
    rel_tol: float = 1e-8,
    grad_tol: float = 1e-10,
    mu0: float = 1e-4,
    schur_threshold: int = 100,
) -> tuple[list[CameraPose], np.ndarray, BAReport]:
    """Levenberg-Marquardt on the anchored objective.

    Points are eliminated by Schur complement above ``schur_threshold``
    points; smaller problems use the dense normal equations. A step is kept
    only if it lowers the objective, so the accepted sequence is monotone.
    """
    state = BAState.from_problem(problem)
    P = len(problem.poses)
    use_schur = len(state.points) > schur_threshold
    cost = objective(problem, state)
    trace = [cost]
    init_rms = reprojection_rms(problem, state)
    mu = mu0
    reason = "max_iters"
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        r = residuals(problem, state)
        blocks = ba_jacobian(problem, state)
        if use_schur:
            J = _sparse_jacobian(problem, state, blocks)
        else:
            J = dense_jacobian(problem, state, blocks)
        g = J.T @ r
        if np.max(np.abs(g)) < grad_tol or cost == 0.0:
            reason, converged = "gradient", True
            break
        accepted = False
        while mu < 1e16:
            try:
                step = _solve_schur(J, r, mu, 6 * P) if use_schur else _solve_dense(J, r, mu)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            cand = state.retract(step[: 6 * P], step[6 * P :])
            new_cost = objective(problem, cand)
            if np.isfinite(new_cost) and new_cost < cost:
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            reason = "damping"
            converged = cost < 1e-20
            log.warning("bundle adjustment: no descent step found; returning best iterate")
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        state, cost = cand, new_cost
        trace.append(cost)
        mu = max(mu / 3.0, 1e-12)
        if rel < rel_tol:
            reason, converged = "relative_change", True
            break
    poses = [
        replace(p, rotation=R, center=C)
        for p, R, C in zip(problem.poses, state.rotations, state.centers)
    ]
    report = BAReport(
        init_rms, reprojection_rms(problem, state), trace[0], cost, it, converged, reason, trace
    )
    return poses, state.points, report
