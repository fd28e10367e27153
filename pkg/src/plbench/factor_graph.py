"""Co-visibility factor graph: vertices, point/line residuals, Jacobians.

Residuals are purely 2D. A point factor compares the measured pixel with
the re-projected landmark; a line factor stacks the signed distances of
the two measured endpoints from the re-projected infinite line. Measured
depths never appear here; they only seed initial landmark values.

Pose increments are left-multiplicative with delta = (rotation 3-vector,
translation 3-vector). Line increments are the 4-DOF orthonormal update.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraIntrinsics,
    GeometryError,
    OrthonormalLine,
    Pose,
    orthonormal_from_plucker,
    plucker_from_endpoints,
    plucker_from_orthonormal,
    skew,
)
from .simulator import Sequence

_DEPTH_EPS = 1e-9
_LINE_EPS = 1e-12


class GraphConstructionError(ValueError):
    pass


@dataclass
class PointFactor:
    frame: int
    point: int
    u: np.ndarray  # (2,) measured pixel
    weight: float = 1.0  # information per axis, 1/sigma^2


@dataclass
class LineFactor:
    frame: int
    line: int
    u_start: np.ndarray  # (2,) measured endpoint pixels
    u_end: np.ndarray
    weight: float = 1.0


@dataclass
class LineVertex:
    """Plucker state of one line landmark; the orthonormal frame is derived
    on demand and cached by the optimizer between updates."""

    n: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=float).reshape(3)
        self.d = np.asarray(self.d, dtype=float).reshape(3)
        nd = abs(float(self.n @ self.d))
        if nd > 1e-10 * (np.linalg.norm(self.n) * np.linalg.norm(self.d) + 1.0):
            raise GraphConstructionError("line vertex violates the Plucker constraint")

    def orthonormal(self) -> OrthonormalLine:
        return orthonormal_from_plucker(self.n, self.d)


@dataclass
class FactorGraph:
    intrinsics: CameraIntrinsics
    poses: dict[int, Pose] = field(default_factory=dict)
    fixed: set[int] = field(default_factory=set)
    points: dict[int, np.ndarray] = field(default_factory=dict)
    lines: dict[int, LineVertex] = field(default_factory=dict)
    point_factors: list[PointFactor] = field(default_factory=list)
    line_factors: list[LineFactor] = field(default_factory=list)

    def check(self) -> None:
        if not self.fixed:
            raise GraphConstructionError("graph needs at least one fixed pose (gauge)")
        if not self.fixed <= set(self.poses):
            raise GraphConstructionError("fixed flag on unknown pose vertex")
        for f in self.point_factors:
            if f.frame not in self.poses or f.point not in self.points:
                raise GraphConstructionError("dangling point factor reference")
        for f in self.line_factors:
            if f.frame not in self.poses or f.line not in self.lines:
                raise GraphConstructionError("dangling line factor reference")

    def total_cost(self) -> float:
        """Weighted squared residual sum over all valid factors."""
        cost = 0.0
        for f in self.point_factors:
            r = point_residual(f.u, self.points[f.point], self.poses[f.frame], self.intrinsics)
            cost += f.weight * float(r @ r)
        for f in self.line_factors:
            v = self.lines[f.line]
            r = line_residual(
                f.u_start, f.u_end, (v.n, v.d), self.poses[f.frame], self.intrinsics
            )
            cost += f.weight * float(r @ r)
        return cost


# ---------------------------------------------------------------------------
# vectorized evaluation core (shared by the spec-level single-factor ops and
# the optimizer's bulk path)


def point_terms(R, t, P_w, u, intr: CameraIntrinsics):
    """Residuals and Jacobians for point factors, batched over axis 0.

    Returns (res (F,2), J_pose (F,2,6), J_point (F,2,3), valid (F,)).
    Factors whose landmark falls behind the camera are invalid; their rows
    are zeroed.
    """
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    P_w = np.asarray(P_w, dtype=float)
    u = np.asarray(u, dtype=float)
    P_c = np.einsum("fij,fj->fi", R, P_w) + t
    z = P_c[:, 2]
    valid = z > _DEPTH_EPS
    zs = np.where(valid, z, 1.0)

    proj = np.empty_like(u)
    proj[:, 0] = intr.fx * P_c[:, 0] / zs + intr.cx
    proj[:, 1] = intr.fy * P_c[:, 1] / zs + intr.cy
    res = u - proj

    F = len(P_c)
    A = np.zeros((F, 2, 3))
    A[:, 0, 0] = intr.fx / zs
    A[:, 0, 2] = -intr.fx * P_c[:, 0] / zs**2
    A[:, 1, 1] = intr.fy / zs
    A[:, 1, 2] = -intr.fy * P_c[:, 1] / zs**2

    Pc_hat = np.zeros((F, 3, 3))
    Pc_hat[:, 0, 1] = -P_c[:, 2]
    Pc_hat[:, 0, 2] = P_c[:, 1]
    Pc_hat[:, 1, 0] = P_c[:, 2]
    Pc_hat[:, 1, 2] = -P_c[:, 0]
    Pc_hat[:, 2, 0] = -P_c[:, 1]
    Pc_hat[:, 2, 1] = P_c[:, 0]

    J_pose = np.empty((F, 2, 6))
    J_pose[:, :, :3] = np.einsum("fij,fjk->fik", A, Pc_hat)  # -A @ (-[P_c]x)
    J_pose[:, :, 3:] = -A
    J_point = -np.einsum("fij,fjk->fik", A, R)

    res[~valid] = 0.0
    J_pose[~valid] = 0.0
    J_point[~valid] = 0.0
    return res, J_pose, J_point, valid


def _batch_skew(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def line_terms(R, t, U, W, u_s, u_e, intr: CameraIntrinsics):
    """Residuals and Jacobians for line factors, batched over axis 0.

    The Plucker pair is reconstructed from the orthonormal state (U, W),
    so derivatives w.r.t. the 4-DOF update probe exactly the composition
    plucker_from_orthonormal(orthonormal_update(...)).

    Returns (res (F,2), J_pose (F,2,6), J_line (F,2,4), valid (F,)).
    """
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    U = np.asarray(U, dtype=float)
    W = np.asarray(W, dtype=float)
    u_s = np.asarray(u_s, dtype=float)
    u_e = np.asarray(u_e, dtype=float)
    F = len(R)

    w1 = W[:, 0, 0]
    w2 = W[:, 1, 0]
    u1 = U[:, :, 0]
    u2 = U[:, :, 1]
    u3 = U[:, :, 2]
    n_w = w1[:, None] * u1
    d_w = w2[:, None] * u2

    Rn = np.einsum("fij,fj->fi", R, n_w)
    Rd = np.einsum("fij,fj->fi", R, d_w)
    n_c = Rn + np.cross(t, Rd)

    KL = intr.line_matrix()
    l = n_c @ KL.T  # (F, 3) homogeneous image line, unnormalized
    denom2 = l[:, 0] ** 2 + l[:, 1] ** 2
    valid = denom2 > _LINE_EPS
    denom = np.sqrt(np.where(valid, denom2, 1.0))

    ub_s = np.concatenate([u_s, np.ones((F, 1))], axis=1)
    ub_e = np.concatenate([u_e, np.ones((F, 1))], axis=1)
    res = np.stack(
        [np.sum(ub_s * l, axis=1) / denom, np.sum(ub_e * l, axis=1) / denom], axis=1
    )

    # d res_i / d l = ub_i / denom - (ub_i . l) (l0, l1, 0) / denom^3
    #               = ub_i / denom - res_i (l0, l1, 0) / denom^2
    lxy = np.zeros((F, 3))
    lxy[:, :2] = l[:, :2]
    dres_dl = np.empty((F, 2, 3))
    dres_dl[:, 0] = ub_s / denom[:, None] - (res[:, 0] / denom2)[:, None] * lxy
    dres_dl[:, 1] = ub_e / denom[:, None] - (res[:, 1] / denom2)[:, None] * lxy

    G = np.einsum("fij,jk->fik", dres_dl, KL)  # d res / d n_c, (F, 2, 3)

    # pose: d n_c / d omega = -[R n_w]x + [(R d_w) x t]x ; d n_c / d rho = -[R d_w]x
    dnc_domega = -_batch_skew(Rn) + _batch_skew(np.cross(Rd, t))
    dnc_drho = -_batch_skew(Rd)
    J_pose = np.empty((F, 2, 6))
    J_pose[:, :, :3] = np.einsum("fij,fjk->fik", G, dnc_domega)
    J_pose[:, :, 3:] = np.einsum("fij,fjk->fik", G, dnc_drho)

    # orthonormal 4-DOF: columns are d(n_w,d_w)/d delta
    dn_w = np.zeros((F, 3, 4))
    dn_w[:, :, 1] = -w1[:, None] * u3
    dn_w[:, :, 2] = w1[:, None] * u2
    dn_w[:, :, 3] = -w2[:, None] * u1
    dd_w = np.zeros((F, 3, 4))
    dd_w[:, :, 0] = w2[:, None] * u3
    dd_w[:, :, 2] = -w2[:, None] * u1
    dd_w[:, :, 3] = w1[:, None] * u2
    t_hat = _batch_skew(t)
    dnc_ddelta = np.einsum("fij,fjk->fik", R, dn_w) + np.einsum(
        "fij,fjk->fik", t_hat, np.einsum("fij,fjk->fik", R, dd_w)
    )
    J_line = np.einsum("fij,fjk->fik", G, dnc_ddelta)

    res[~valid] = 0.0
    J_pose[~valid] = 0.0
    J_line[~valid] = 0.0
    return res, J_pose, J_line, valid


# ---------------------------------------------------------------------------
# single-factor operations


def point_residual(u, P_w, T: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Eq.-style 2D re-projection residual u - pi(P_w, T)."""
    P_c = T.transform(P_w)
    if P_c[2] <= _DEPTH_EPS:
        raise GeometryError("point behind the camera")
    res, _, _, _ = point_terms(
        T.rotation()[None], T.t[None], np.asarray(P_w, float)[None],
        np.asarray(u, float)[None], intr,
    )
    return res[0]


def project_line(L, T: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Re-project a world Plucker line to the normalized homogeneous image
    line (Euclidean norm 1).

    Implemented through the camera-frame moment; equals the normalized
    cross product of two projected points of the line.
    """
    n_w, d_w = (np.asarray(v, dtype=float) for v in L)
    R = T.rotation()
    Rd = R @ d_w
    n_c = R @ n_w + np.cross(T.t, Rd)
    l = intr.line_matrix() @ n_c
    norm = np.linalg.norm(l)
    if l[0] ** 2 + l[1] ** 2 <= _LINE_EPS or norm == 0.0:
        raise GeometryError("degenerate line projection")
    return l / norm


def project_line_by_endpoints(L, T: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Oracle form of project_line: cross product of two projected points."""
    n_w, d_w = (np.asarray(v, dtype=float) for v in L)
    R = T.rotation()
    n_c = R @ n_w + np.cross(T.t, R @ d_w)
    d_c = R @ d_w
    p1 = np.cross(d_c, n_c) / float(d_c @ d_c)  # closest point to the camera
    p2 = p1 + d_c
    K = intr.matrix()
    l = np.cross(K @ p1, K @ p2)
    norm = np.linalg.norm(l)
    if norm == 0.0:
        raise GeometryError("degenerate line projection")
    return l / norm


def line_residual(u_s, u_e, L, T: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Signed distances of both measured endpoints from the re-projected line."""
    l = project_line(L, T, intr)
    denom = np.sqrt(l[0] ** 2 + l[1] ** 2)
    ub_s = np.array([u_s[0], u_s[1], 1.0])
    ub_e = np.array([u_e[0], u_e[1], 1.0])
    return np.array([ub_s @ l / denom, ub_e @ l / denom])


def point_jacobians(u, P_w, T: Pose, intr: CameraIntrinsics):
    """(d res / d pose increment (2x6), d res / d point (2x3))."""
    _, J_pose, J_point, valid = point_terms(
        T.rotation()[None], T.t[None], np.asarray(P_w, float)[None],
        np.asarray(u, float)[None], intr,
    )
    if not valid[0]:
        raise GeometryError("point behind the camera")
    return J_pose[0], J_point[0]


def line_jacobians(u_s, u_e, o: OrthonormalLine, T: Pose, intr: CameraIntrinsics):
    """(d res / d pose increment (2x6), d res / d orthonormal delta (2x4))."""
    _, J_pose, J_line, valid = line_terms(
        T.rotation()[None], T.t[None], o.U[None], o.W[None],
        np.asarray(u_s, float)[None], np.asarray(u_e, float)[None], intr,
    )
    if not valid[0]:
        raise GeometryError("degenerate line projection")
    return J_pose[0], J_line[0]


# ---------------------------------------------------------------------------
# construction


def build_covisibility_graph(
    seq: Sequence,
    trajectory: list[Pose],
    initial_map,
    sigma_s: float = 1.0,
) -> FactorGraph:
    """One pose vertex per frame (first fixed), one vertex per landmark
    observed at least twice, one factor per measurement of those landmarks.

    ``initial_map`` provides initial values through ``point_positions()``
    (id -> (3,) array) and ``line_endpoints()`` (id -> (2,3) array);
    tracking.SparseMap satisfies this. Measurements enter as 2D pixels
    only.
    """
    if len(trajectory) != len(seq.frames):
        raise GraphConstructionError("trajectory length does not match frame count")
    weight = 1.0 / (sigma_s * sigma_s)
    point_positions = initial_map.point_positions()
    line_endpoints = initial_map.line_endpoints()

    point_obs = {i: len(f) for i, f in seq.point_tracks().items()}
    line_obs = {i: len(f) for i, f in seq.line_tracks().items()}

    graph = FactorGraph(intrinsics=seq.intrinsics)
    for frame_id, pose in enumerate(trajectory):
        graph.poses[frame_id] = pose
    graph.fixed.add(0)

    for pid, count in sorted(point_obs.items()):
        if count < 2:
            continue
        if pid not in point_positions:
            raise GraphConstructionError(f"point {pid} observed but missing from the map")
        graph.points[pid] = np.asarray(point_positions[pid], dtype=float).copy()
    for lid, count in sorted(line_obs.items()):
        if count < 2:
            continue
        if lid not in line_endpoints:
            raise GraphConstructionError(f"line {lid} observed but missing from the map")
        ends = np.asarray(line_endpoints[lid], dtype=float)
        n, d = plucker_from_endpoints(ends[0], ends[1])
        s = np.sqrt(n @ n + d @ d)
        graph.lines[lid] = LineVertex(n / s, d / s)

    for f in seq.frames:
        for pm in f.points:
            if pm.landmark_id in graph.points:
                graph.point_factors.append(
                    PointFactor(f.frame_id, pm.landmark_id, pm.u.copy(), weight)
                )
        for lm in f.lines:
            if lm.landmark_id in graph.lines:
                graph.line_factors.append(
                    LineFactor(
                        f.frame_id, lm.landmark_id, lm.start.u.copy(), lm.end.u.copy(), weight
                    )
                )
    graph.check()
    return graph
