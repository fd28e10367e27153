"""Baseline front-end: EPnP pose estimation (frame-to-frame and
map-to-frame) with incremental landmark fusion and parallel-line grouping.

Data association uses the ground-truth landmark ids carried by the
measurements; the geometric gates (radius/angle/distance thresholds) then
decide whether an observation also updates the fused landmark estimate.
Lines never enter the pose solver; they matter only for map building and
the later bundle adjustment.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .factor_graph import point_terms
from .geometry import (
    CameraIntrinsics,
    LineLandmark,
    Pose,
    backproject,
    line_angle,
    rigid_fit,
    se3_exp_update,
)
from .simulator import Sequence


class InsufficientDataError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


class TrackingLostError(RuntimeError):
    def __init__(self, frame_id: int, message: str):
        self.frame_id = frame_id
        super().__init__(f"tracking lost at frame {frame_id}: {message}")


@dataclass(frozen=True)
class Correspondence3D2D:
    """A world point paired with its observed pixel in one frame."""

    point_w: np.ndarray
    pixel: np.ndarray


# ---------------------------------------------------------------------------
# EPnP


@dataclass(frozen=True)
class PnPResult:
    pose: Pose
    mean_error: float  # mean reprojection error over all correspondences, px


def _reprojection_errors(R, t, P_w, u, intr) -> np.ndarray:
    P_c = P_w @ R.T + t
    z = P_c[:, 2]
    bad = z <= 1e-9
    zs = np.where(bad, 1.0, z)
    proj = np.stack(
        [intr.fx * P_c[:, 0] / zs + intr.cx, intr.fy * P_c[:, 1] / zs + intr.cy], axis=1
    )
    err = np.linalg.norm(proj - u, axis=1)
    err[bad] = 1e9
    return err


def _refine_pose(R, t, P_w, u, intr, iterations=10):
    """Gauss-Newton on the reprojection error, left-multiplicative updates."""
    T = Pose.from_rt(R, t)
    err = float(np.mean(_reprojection_errors(T.rotation(), T.t, P_w, u, intr)))
    n = len(P_w)
    for _ in range(iterations):
        R_all = np.broadcast_to(T.rotation(), (n, 3, 3))
        t_all = np.broadcast_to(T.t, (n, 3))
        res, J_pose, _, valid = point_terms(R_all, t_all, P_w, u, intr)
        if valid.sum() < 4:
            break
        J = J_pose.reshape(-1, 6)
        r = res.reshape(-1)
        H = J.T @ J
        b = J.T @ r
        try:
            delta = np.linalg.solve(H + 1e-12 * np.eye(6), b)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(delta)):
            break
        # backtracking keeps the iteration monotone
        step = 1.0
        for _try in range(6):
            T_new = se3_exp_update(T, step * delta)
            err_new = float(
                np.mean(_reprojection_errors(T_new.rotation(), T_new.t, P_w, u, intr))
            )
            if err_new <= err:
                T, err = T_new, err_new
                break
            step *= 0.5
        else:
            break
        if np.linalg.norm(step * delta) < 1e-14:
            break
    return T, err


def _epnp_control_points(P_w):
    c0 = P_w.mean(axis=0)
    centered = P_w - c0
    cov = centered.T @ centered / len(P_w)
    evals, evecs = np.linalg.eigh(cov)
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    if evals[0] <= 0 or evals[1] < 1e-12 * evals[0]:
        raise DegenerateGeometryError("points are collinear or coincident")
    planar = evals[2] < 1e-8 * evals[0]
    k = 2 if planar else 3
    ctrl = [c0]
    for i in range(k):
        ctrl.append(c0 + np.sqrt(evals[i]) * evecs[:, i])
    return np.array(ctrl)


def _epnp_candidates(P_w, u, intr):
    """Camera-frame control-point candidates from the EPnP null space."""
    n = len(P_w)
    ctrl_w = _epnp_control_points(P_w)
    m = len(ctrl_w)

    B = (ctrl_w[1:] - ctrl_w[0]).T  # 3 x (m-1)
    rel = (P_w - ctrl_w[0]).T
    if m == 4:
        alpha_rest = np.linalg.solve(B, rel)
    else:
        alpha_rest = np.linalg.lstsq(B, rel, rcond=None)[0]
    alphas = np.empty((n, m))
    alphas[:, 1:] = alpha_rest.T
    alphas[:, 0] = 1.0 - alphas[:, 1:].sum(axis=1)

    M = np.zeros((2 * n, 3 * m))
    for j in range(m):
        M[0::2, 3 * j + 0] = alphas[:, j] * intr.fx
        M[0::2, 3 * j + 2] = alphas[:, j] * (intr.cx - u[:, 0])
        M[1::2, 3 * j + 1] = alphas[:, j] * intr.fy
        M[1::2, 3 * j + 2] = alphas[:, j] * (intr.cy - u[:, 1])
    _, vecs = np.linalg.eigh(M.T @ M)
    v1 = vecs[:, 0].reshape(m, 3)
    v2 = vecs[:, 1].reshape(m, 3)

    pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
    dc = np.array([np.linalg.norm(ctrl_w[i] - ctrl_w[j]) for i, j in pairs])
    dv1 = np.array([v1[i] - v1[j] for i, j in pairs])
    dv2 = np.array([v2[i] - v2[j] for i, j in pairs])

    candidates = []

    # one-dimensional null space: match inter-control-point distances
    norm1 = np.linalg.norm(dv1, axis=1)
    denom = float(norm1 @ norm1)
    if denom > 1e-18:
        beta = float(norm1 @ dc) / denom
        candidates.append(beta * v1)

    # two-dimensional case: solve for (b1^2, b1 b2, b2^2) then polish
    A = np.stack(
        [
            np.sum(dv1 * dv1, axis=1),
            2.0 * np.sum(dv1 * dv2, axis=1),
            np.sum(dv2 * dv2, axis=1),
        ],
        axis=1,
    )
    sol, *_ = np.linalg.lstsq(A, dc**2, rcond=None)
    b11, b12, b22 = sol
    b1 = np.sqrt(max(b11, 0.0))
    b2 = np.sqrt(max(b22, 0.0)) * (1.0 if b12 >= 0 else -1.0)
    if b1 > 1e-12:
        betas = np.array([b1, b2])
        for _ in range(5):  # Gauss-Newton on the distance residuals
            dvc = betas[0] * dv1 + betas[1] * dv2
            r = np.sum(dvc * dvc, axis=1) - dc**2
            J = np.stack([2 * np.sum(dvc * dv1, axis=1), 2 * np.sum(dvc * dv2, axis=1)], axis=1)
            JtJ = J.T @ J
            try:
                step = np.linalg.solve(JtJ + 1e-12 * np.eye(2), J.T @ r)
            except np.linalg.LinAlgError:
                break
            betas = betas - step
        candidates.append(betas[0] * v1 + betas[1] * v2)

    # positive-depth disambiguation: each candidate or its negation
    out = []
    for x in candidates:
        if np.mean(x[:, 2]) < 0:
            x = -x
        out.append(x)
    return ctrl_w, alphas, out


def solve_pnp(
    world_points,
    pixels,
    intr: CameraIntrinsics,
    refine_iters: int = 10,
    initial: Pose | None = None,
) -> PnPResult:
    """Camera pose from 3D-2D correspondences: EPnP control-point
    formulation followed by Gauss-Newton refinement.

    ``initial``, when given, competes with the EPnP candidates (useful as
    a motion prior); the refined pose with the lowest mean reprojection
    error wins.
    """
    P_w = np.asarray(world_points, dtype=float).reshape(-1, 3)
    u = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(P_w) != len(u):
        raise InsufficientDataError("points and pixels differ in length")
    if len(P_w) < 4:
        raise InsufficientDataError(f"need at least 4 correspondences, got {len(P_w)}")

    ctrl_w, alphas, candidates = _epnp_candidates(P_w, u, intr)

    poses = []
    for ctrl_cam in candidates:
        P_cam = alphas @ ctrl_cam
        R, t = rigid_fit(P_w, P_cam)
        poses.append(Pose.from_rt(R, t))
    if initial is not None:
        poses.append(initial)

    best = None
    for T0 in poses:
        T, err = _refine_pose(T0.rotation(), T0.t, P_w, u, intr, iterations=refine_iters)
        if best is None or err < best[1]:
            best = (T, err)
    return PnPResult(pose=best[0], mean_error=best[1])


# ---------------------------------------------------------------------------
# sparse map


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    count: int = 1  # fused samples in the running mean


@dataclass
class MapLine:
    id: int
    endpoints: np.ndarray  # (2, 3)
    samples: list = field(default_factory=list)  # accumulated endpoint pairs
    count: int = 1


class SparseMap:
    """Point/line landmark store with a KD-tree over point positions.

    The tree is rebuilt lazily: queries always reflect the current table.
    """

    def __init__(self):
        self.points: dict[int, MapPoint] = {}
        self.lines: dict[int, MapLine] = {}
        self._tree = None
        self._tree_ids: list[int] = []

    def _invalidate(self):
        self._tree = None

    def _kdtree(self):
        if self._tree is None and self.points:
            self._tree_ids = sorted(self.points)
            data = np.array([self.points[i].position for i in self._tree_ids])
            self._tree = cKDTree(data)
        return self._tree

    def nearest_point(self, position):
        """(landmark id, distance) of the nearest map point, or None."""
        tree = self._kdtree()
        if tree is None:
            return None
        dist, idx = tree.query(np.asarray(position, dtype=float))
        return self._tree_ids[int(idx)], float(dist)

    def point_positions(self) -> dict[int, np.ndarray]:
        return {i: p.position for i, p in self.points.items()}

    def line_endpoints(self) -> dict[int, np.ndarray]:
        return {i: l.endpoints for i, l in self.lines.items()}

    # -- fusion ------------------------------------------------------------

    def fuse_point(self, position, landmark_id=None, radius_thresh: float = 0.05) -> int:
        """Merge the candidate into the map or insert it.

        With a known id the candidate merges into that landmark when it
        falls inside the radius gate (incremental mean); otherwise the
        landmark keeps its estimate. Without an id the nearest neighbor
        inside the gate absorbs the candidate, else a fresh landmark is
        created.
        """
        position = np.asarray(position, dtype=float)
        if landmark_id is None:
            hit = self.nearest_point(position)
            if hit is not None and hit[1] <= radius_thresh:
                landmark_id = hit[0]
            else:
                landmark_id = max(self.points, default=-1) + 1
        if landmark_id in self.points:
            mp = self.points[landmark_id]
            if np.linalg.norm(position - mp.position) <= radius_thresh:
                mp.position = mp.position + (position - mp.position) / (mp.count + 1)
                mp.count += 1
                self._invalidate()
        else:
            self.points[landmark_id] = MapPoint(landmark_id, position.copy())
            self._invalidate()
        return landmark_id

    def _line_gates(self, line: MapLine, endpoints, angle_thresh_deg, dist_thresh):
        d_existing = line.endpoints[1] - line.endpoints[0]
        d_new = endpoints[1] - endpoints[0]
        angle = np.degrees(line_angle(d_existing, d_new))
        if angle > angle_thresh_deg:
            return False
        mid = 0.5 * (endpoints[0] + endpoints[1])
        rel = mid - line.endpoints[0]
        d_hat = d_existing / np.linalg.norm(d_existing)
        dist = np.linalg.norm(rel - (rel @ d_hat) * d_hat)
        return dist <= dist_thresh

    def fuse_line(
        self,
        endpoints,
        landmark_id=None,
        angle_thresh_deg: float = 5.0,
        dist_thresh: float = 0.05,
    ) -> int:
        """Merge when direction angle and midpoint-to-line distance pass
        their gates; merged lines are refit over all accumulated endpoint
        samples. Otherwise insert (or, with a known id, keep the estimate).
        """
        endpoints = np.asarray(endpoints, dtype=float).reshape(2, 3)
        if landmark_id is None:
            for lid in sorted(self.lines):
                if self._line_gates(self.lines[lid], endpoints, angle_thresh_deg, dist_thresh):
                    landmark_id = lid
                    break
            else:
                landmark_id = max(self.lines, default=-1) + 1
        if landmark_id in self.lines:
            ml = self.lines[landmark_id]
            if self._line_gates(ml, endpoints, angle_thresh_deg, dist_thresh):
                ml.samples.append(endpoints.copy())
                ml.count += 1
                ml.endpoints = _refit_line(np.concatenate(ml.samples, axis=0))
        else:
            self.lines[landmark_id] = MapLine(landmark_id, endpoints.copy(),
                                              samples=[endpoints.copy()])
        return landmark_id


def _refit_line(samples: np.ndarray) -> np.ndarray:
    """Principal-axis fit through endpoint samples; extreme projections
    become the new endpoints."""
    center = samples.mean(axis=0)
    centered = samples - center
    _, _, Vt = np.linalg.svd(centered, full_matrices=False)
    d_hat = Vt[0]
    t = centered @ d_hat
    return np.array([center + t.min() * d_hat, center + t.max() * d_hat])


# ---------------------------------------------------------------------------
# RANSAC line fitting


@dataclass(frozen=True)
class RansacLineFit:
    start: np.ndarray
    end: np.ndarray
    inliers: np.ndarray  # boolean mask over the input points


def fit_line_ransac(points, iterations: int = 100, inlier_thresh: float = 0.01,
                    rng=None) -> RansacLineFit:
    """Best two-point hypothesis by inlier count, refined by a principal
    axis fit over the inliers; endpoints are their extreme projections."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    if n < 2:
        raise InsufficientDataError("need at least 2 points to fit a line")
    span = points.max(axis=0) - points.min(axis=0)
    if np.linalg.norm(span) < 1e-12:
        raise DegenerateGeometryError("all points coincide")
    if rng is None:
        rng = np.random.default_rng(0)

    best_mask = None
    best_count = -1
    for _ in range(iterations):
        i, j = rng.choice(n, size=2, replace=False)
        d = points[j] - points[i]
        norm = np.linalg.norm(d)
        if norm < 1e-12:
            continue
        d_hat = d / norm
        rel = points - points[i]
        dist = np.linalg.norm(rel - np.outer(rel @ d_hat, d_hat), axis=1)
        mask = dist <= inlier_thresh
        if mask.sum() > best_count:
            best_count = int(mask.sum())
            best_mask = mask
    if best_mask is None or best_count < 2:
        raise DegenerateGeometryError("no line hypothesis found")

    fitted = _refit_line(points[best_mask])
    return RansacLineFit(start=fitted[0], end=fitted[1], inliers=best_mask)


# ---------------------------------------------------------------------------
# parallel-line grouping


@dataclass
class ParallelGroup:
    group_id: int
    direction: np.ndarray  # unit vector shared by every member
    members: list[LineLandmark]


def group_parallel_lines(lines, angle_thresh_deg: float = 5.0) -> list[ParallelGroup]:
    """Greedy clustering by direction angle, then exact rectification.

    Per group the signs are unified, the average unit direction becomes
    the group direction, and every member's endpoints are re-projected
    onto the axis through its own midpoint. Afterwards all members of a
    group are exactly parallel, and re-running the operation reproduces
    the same groups and endpoints.
    """
    groups: list[list[LineLandmark]] = []
    refs: list[np.ndarray] = []
    for line in lines:
        d = line.direction()
        for gi, ref in enumerate(refs):
            if np.degrees(line_angle(ref, d)) <= angle_thresh_deg:
                groups[gi].append(line)
                break
        else:
            groups.append([line])
            refs.append(d)

    out = []
    for gid, (members, ref) in enumerate(zip(groups, refs)):
        dirs = []
        for line in members:
            d = line.direction()
            dirs.append(-d if float(d @ ref) < 0 else d)
        if all(np.array_equal(d, dirs[0]) for d in dirs[1:]):
            d_hat = dirs[0]
        else:
            mean = np.mean(dirs, axis=0)
            d_hat = mean / np.linalg.norm(mean)
        rectified = []
        for line in members:
            mid = line.midpoint()
            a = float((line.endpoints[0] - mid) @ d_hat)
            b = float((line.endpoints[1] - mid) @ d_hat)
            rectified.append(
                LineLandmark(line.id, np.array([mid + a * d_hat, mid + b * d_hat]),
                             group_id=gid)
            )
        out.append(ParallelGroup(group_id=gid, direction=d_hat, members=rectified))
    return out


# ---------------------------------------------------------------------------
# trackers


def _shared_point_ids(frame_a, frame_b):
    ids_a = {pm.landmark_id: pm for pm in frame_a.points}
    shared = []
    for pm in frame_b.points:
        if pm.landmark_id in ids_a:
            shared.append((ids_a[pm.landmark_id], pm))
    return shared


def track_frame_to_frame(seq: Sequence) -> list[Pose]:
    """Chain relative poses: back-project the previous frame's measured
    depths, match by landmark id, solve PnP in the previous camera frame.

    The first pose is anchored to ground truth (gauge fixing).
    """
    traj = [seq.gt_trajectory[0]]
    for j in range(1, len(seq.frames)):
        shared = _shared_point_ids(seq.frames[j - 1], seq.frames[j])
        if len(shared) < 4:
            raise TrackingLostError(j, f"only {len(shared)} shared landmarks")
        P_prev = np.array(
            [backproject(pm_prev.u, pm_prev.d, seq.intrinsics) for pm_prev, _ in shared]
        )
        pixels = np.array([pm_curr.u for _, pm_curr in shared])
        rel = solve_pnp(P_prev, pixels, seq.intrinsics).pose
        traj.append(rel.compose(traj[j - 1]))
    return traj


def track_map_to_frame(
    seq: Sequence,
    radius_thresh: float = 0.5,
    angle_thresh_deg: float = 15.0,
    dist_thresh: float = 0.5,
) -> tuple[list[Pose], SparseMap]:
    """Track against an incrementally fused map.

    The map starts from frame 0 at the ground-truth pose; each new frame
    is solved against the mapped points seen in it, then its measurements
    are back-projected and fused (co-visible ones update landmarks inside
    the gates, new ids are inserted).

    The default gates are sized to the depth-noise model (about 3 sigma of
    the disparity noise at working depths): narrower gates starve the
    running means and the map never averages its noise away.
    """
    sparse_map = SparseMap()
    traj: list[Pose] = []

    def fuse_frame(frame, T: Pose):
        T_inv = T.inverse()
        for pm in frame.points:
            P_w = T_inv.transform(backproject(pm.u, pm.d, seq.intrinsics))
            sparse_map.fuse_point(P_w, landmark_id=pm.landmark_id,
                                  radius_thresh=radius_thresh)
        for lm in frame.lines:
            ends_c = np.array(
                [
                    backproject(lm.start.u, lm.start.d, seq.intrinsics),
                    backproject(lm.end.u, lm.end.d, seq.intrinsics),
                ]
            )
            sparse_map.fuse_line(T_inv.transform(ends_c), landmark_id=lm.landmark_id,
                                 angle_thresh_deg=angle_thresh_deg,
                                 dist_thresh=dist_thresh)

    T0 = seq.gt_trajectory[0]
    traj.append(T0)
    fuse_frame(seq.frames[0], T0)

    for j in range(1, len(seq.frames)):
        frame = seq.frames[j]
        corrs = [
            (sparse_map.points[pm.landmark_id].position, pm.u)
            for pm in frame.points
            if pm.landmark_id in sparse_map.points
        ]
        if len(corrs) < 4:
            raise TrackingLostError(j, f"only {len(corrs)} mapped landmarks visible")
        P_w = np.array([c[0] for c in corrs])
        pixels = np.array([c[1] for c in corrs])
        T = solve_pnp(P_w, pixels, seq.intrinsics, initial=traj[j - 1]).pose
        traj.append(T)
        fuse_frame(frame, T)

    return traj, sparse_map
