"""SE(3), pinhole and 3D-line primitives shared by every other module.

Conventions:
  * ``Pose`` stores the world-to-camera transform T_cw: X_c = R @ X_w + t.
  * Quaternions are (qx, qy, qz, qw), unit norm.
  * Pixels: u right, v down, origin at the top-left image corner.
  * A 3D line in Plucker form is the pair (n, d) with moment n = Ps x Pe and
    direction d = Pe - Ps for any two points Ps, Pe on the line; n . d = 0.
  * The orthonormal line representation is the pair (U in SO(3), W in SO(2));
    minimal updates are 4-vectors (3 for U, 1 for W).

All values are immutable after construction and every function is pure.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PLUCKER_TOL = 1e-10


class GeometryError(ValueError):
    """Invalid geometric input (nonpositive depth, degenerate line, ...)."""


class DegenerateLineError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# rotation helpers


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues formula, series expansion below 1e-8 rad."""
    omega = np.asarray(omega, dtype=float)
    angle = float(np.linalg.norm(omega))
    K = skew(omega)
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * (K @ K)
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * K + c * (K @ K)


def so3_log(R) -> np.ndarray:
    """Rotation vector of R; principal branch, angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_angle = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    axial = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-8:
        return axial
    if np.pi - angle < 1e-6:
        # near pi the axial part vanishes; recover the axis from R + I
        M = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(max(M[k, k], 1e-12))
        axis = axis / np.linalg.norm(axis)
        if np.dot(axis, axial) < 0:
            axis = -axis
        return angle * axis
    return (angle / np.sin(angle)) * axial


def _so3_left_jacobian(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    angle = float(np.linalg.norm(omega))
    K = skew(omega)
    if angle < 1e-8:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    c1 = (1.0 - np.cos(angle)) / a2
    c2 = (angle - np.sin(angle)) / (a2 * angle)
    return np.eye(3) + c1 * K + c2 * (K @ K)


def rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    return float(np.linalg.norm(so3_log(R)))


def quat_to_matrix(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """(qx, qy, qz, qw) with qw >= 0, Shepperd's branch selection."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
        )
    else:
        k = int(np.argmax(np.diag(R)))
        i, j = (k + 1) % 3, (k + 2) % 3
        s = np.sqrt(R[k, k] - R[i, i] - R[j, j] + 1.0) * 2.0
        q = np.empty(4)
        q[k] = 0.25 * s
        q[i] = (R[i, k] + R[k, i]) / s
        q[j] = (R[j, k] + R[k, j]) / s
        q[3] = (R[j, i] - R[i, j]) / s
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(q1, q2) -> np.ndarray:
    x1, y1, z1, w1 = q1
    x2, y2, z2, w2 = q2
    return np.array(
        [
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        ]
    )


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def line_matrix(self) -> np.ndarray:
        """Maps a camera-frame line moment to the homogeneous image line.

        Equals det(K) * inv(K).T, so that line_matrix @ (P1 x P2) equals
        (K P1) x (K P2) exactly for any camera points P1, P2.
        """
        fx, fy, cx, cy = self.fx, self.fy, self.cx, self.cy
        return np.array([[fy, 0, 0], [0, fx, 0], [-fy * cx, -fx * cy, fx * fy]])

    def contains(self, u) -> np.ndarray:
        """Half-open image-bounds test for pixels of shape (..., 2)."""
        u = np.asarray(u, dtype=float)
        return (
            (u[..., 0] >= 0.0)
            & (u[..., 0] < self.width)
            & (u[..., 1] >= 0.0)
            & (u[..., 1] < self.height)
        )


def project(p_cam, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points (..., 3) -> pixels (..., 2).

    Raises GeometryError on nonpositive depth.
    """
    p_cam = np.asarray(p_cam, dtype=float)
    z = p_cam[..., 2]
    if np.any(z <= 0):
        raise GeometryError("projection requires positive depth")
    u = intr.fx * p_cam[..., 0] / z + intr.cx
    v = intr.fy * p_cam[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def backproject(u, d, intr: CameraIntrinsics) -> np.ndarray:
    """Pixel (..., 2) plus depth (...) -> camera-frame point (..., 3)."""
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise GeometryError("backprojection requires positive depth")
    x = (u[..., 0] - intr.cx) / intr.fx * d
    y = (u[..., 1] - intr.cy) / intr.fy * d
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


# ---------------------------------------------------------------------------
# poses


@dataclass(frozen=True)
class Pose:
    """Rigid transform T_cw as unit quaternion (qx, qy, qz, qw) + translation."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4).copy()
        t = np.asarray(self.t, dtype=float).reshape(3).copy()
        norm = float(np.linalg.norm(q))
        if norm == 0.0 or not np.isfinite(norm):
            raise GeometryError("quaternion must be nonzero and finite")
        # only touch the stored values when actually off the manifold, so
        # that already-unit quaternions survive round-trips bit-exactly
        if abs(norm - 1.0) > 1e-12:
            q = q / norm
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @staticmethod
    def from_rt(R, t) -> "Pose":
        return Pose(matrix_to_quat(R), np.asarray(t, dtype=float))

    @staticmethod
    def from_matrix(T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return Pose.from_rt(T[:3, :3], T[:3, 3])

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation()
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Pose") -> "Pose":
        """self o other: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.q, other.q)
        t = self.rotation() @ other.t + self.t
        return Pose(q, t)

    def inverse(self) -> "Pose":
        Rt = self.rotation().T
        return Pose(np.array([-self.q[0], -self.q[1], -self.q[2], self.q[3]]), -Rt @ self.t)

    def transform(self, p) -> np.ndarray:
        """Apply to world points of shape (3,) or (N, 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation().T + self.t

    def center(self) -> np.ndarray:
        """Camera center in world coordinates, -R^T t."""
        return -(self.rotation().T @ self.t)


def transform_point(T: Pose, p) -> np.ndarray:
    return T.transform(p)


def se3_exp_update(T: Pose, delta) -> Pose:
    """Left-multiplicative on-manifold update T <- Exp(delta) o T.

    delta is (omega, rho): rotation 3-vector first, translation second.
    """
    delta = np.asarray(delta, dtype=float).reshape(6)
    omega, rho = delta[:3], delta[3:]
    R_inc = so3_exp(omega)
    t_inc = _so3_left_jacobian(omega) @ rho
    R = R_inc @ T.rotation()
    t = R_inc @ T.t + t_inc
    return Pose.from_rt(R, t)


# ---------------------------------------------------------------------------
# measurements and landmarks


@dataclass(frozen=True)
class PointMeasurement:
    """One observed point: pixel position (px) and depth (m).

    Image-bounds checks need the calibration and are enforced by the
    simulator and the sequence reader, not here.
    """

    landmark_id: int
    u: np.ndarray
    d: float

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float).reshape(2).copy()
        u.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "d", float(self.d))
        if not np.all(np.isfinite(u)) or not np.isfinite(self.d):
            raise GeometryError("measurement must be finite")
        if self.d <= 0:
            raise GeometryError("nonpositive depth")


@dataclass(frozen=True)
class LineMeasurement:
    """One observed segment: start/end endpoint records sharing the line id."""

    landmark_id: int
    start: PointMeasurement
    end: PointMeasurement

    def __post_init__(self):
        if np.array_equal(self.start.u, self.end.u):
            raise GeometryError("line measurement endpoints coincide")

    def length(self) -> float:
        return float(np.linalg.norm(self.end.u - self.start.u))


@dataclass(frozen=True)
class PointLandmark:
    id: int
    position: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(p)):
            raise GeometryError("landmark position must be finite")
        p.flags.writeable = False
        object.__setattr__(self, "position", p)


@dataclass(frozen=True)
class LineLandmark:
    """World-frame 3D segment; the Plucker view is derived from the endpoints."""

    id: int
    endpoints: np.ndarray  # (2, 3), start/end
    group_id: int | None = None

    def __post_init__(self):
        e = np.asarray(self.endpoints, dtype=float).reshape(2, 3).copy()
        if not np.all(np.isfinite(e)):
            raise GeometryError("line endpoints must be finite")
        if np.array_equal(e[0], e[1]):
            raise DegenerateLineError("line endpoints coincide")
        e.flags.writeable = False
        object.__setattr__(self, "endpoints", e)

    def plucker(self) -> tuple[np.ndarray, np.ndarray]:
        return plucker_from_endpoints(self.endpoints[0], self.endpoints[1])

    def direction(self) -> np.ndarray:
        d = self.endpoints[1] - self.endpoints[0]
        return d / np.linalg.norm(d)

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.endpoints[0] + self.endpoints[1])


# ---------------------------------------------------------------------------
# Plucker lines


def plucker_from_endpoints(ps, pe) -> tuple[np.ndarray, np.ndarray]:
    """Moment n = Ps x Pe and direction d = Pe - Ps."""
    ps = np.asarray(ps, dtype=float)
    pe = np.asarray(pe, dtype=float)
    if np.array_equal(ps, pe):
        raise DegenerateLineError("coincident endpoints define no line")
    return np.cross(ps, pe), pe - ps


def transform_plucker(T: Pose, n, d) -> tuple[np.ndarray, np.ndarray]:
    """Map a Plucker pair through T: n' = R n + [t]x R d, d' = R d."""
    R = T.rotation()
    Rd = R @ np.asarray(d, dtype=float)
    return R @ np.asarray(n, dtype=float) + np.cross(T.t, Rd), Rd


def plucker_closest_point(n, d) -> np.ndarray:
    """Point of the line closest to the origin: (d x n) / |d|^2."""
    d = np.asarray(d, dtype=float)
    return np.cross(d, n) / float(d @ d)


# ---------------------------------------------------------------------------
# orthonormal line representation


@dataclass(frozen=True)
class OrthonormalLine:
    """Minimal 4-DOF line state: U in SO(3), W in SO(2).

    ``degenerate`` marks lines through the origin (zero moment), for which
    the first column of U is an arbitrary but deterministic unit normal.
    """

    U: np.ndarray
    W: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float).reshape(3, 3).copy()
        W = np.asarray(self.W, dtype=float).reshape(2, 2).copy()
        U.flags.writeable = False
        W.flags.writeable = False
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "W", W)


def _unit_normal_orthogonal_to(d_hat: np.ndarray) -> np.ndarray:
    # deterministic: cross with the coordinate axis least aligned with d
    k = int(np.argmin(np.abs(d_hat)))
    e = np.zeros(3)
    e[k] = 1.0
    n = np.cross(d_hat, e)
    return n / np.linalg.norm(n)


def orthonormal_from_plucker(n, d) -> OrthonormalLine:
    """(U, W) with U columns [n/|n|, d/|d|, (n x d)/(|n||d|)].

    A zero moment (line through the origin) yields a flagged degenerate
    frame with a deterministic substitute normal.
    """
    n = np.asarray(n, dtype=float)
    d = np.asarray(d, dtype=float)
    nn = float(np.linalg.norm(n))
    nd = float(np.linalg.norm(d))
    if nd == 0.0:
        raise DegenerateLineError("line direction must be nonzero")
    d_hat = d / nd
    degenerate = nn < 1e-12 * max(nd, 1.0)
    if degenerate:
        u1 = _unit_normal_orthogonal_to(d_hat)
        nn = 0.0
    else:
        u1 = n / nn
    u3 = np.cross(u1, d_hat)
    u3 = u3 / np.linalg.norm(u3)
    U = np.column_stack([u1, d_hat, u3])
    s = np.hypot(nn, nd)
    W = np.array([[nn / s, -nd / s], [nd / s, nn / s]])
    return OrthonormalLine(U, W, degenerate)


def plucker_from_orthonormal(o: OrthonormalLine) -> tuple[np.ndarray, np.ndarray]:
    """Inverse map: n = W00 * U[:,0], d = W10 * U[:,1] (unit joint scale)."""
    return o.W[0, 0] * o.U[:, 0], o.W[1, 0] * o.U[:, 1]


def orthonormal_update(o: OrthonormalLine, delta) -> OrthonormalLine:
    """Right-multiplicative update U <- U Exp(delta[:3]), W <- W Rot2(delta[3])."""
    delta = np.asarray(delta, dtype=float).reshape(4)
    return OrthonormalLine(o.U @ so3_exp(delta[:3]), o.W @ rot2(delta[3]), o.degenerate)


def rigid_fit(src, dst) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation/translation with dst ~ R @ src + t (no scale).

    Horn's closed form via SVD with a determinant guard against
    reflections.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def line_angle(d1, d2) -> float:
    """Undirected angle between two direction vectors, exact at zero.

    atan2 of the cross-product norm keeps tiny angles meaningful where the
    arccos form would collapse to ~1e-8.
    """
    d1 = np.asarray(d1, dtype=float)
    d2 = np.asarray(d2, dtype=float)
    c = np.linalg.norm(np.cross(d1, d2))
    s = abs(float(d1 @ d2))
    return float(np.arctan2(c, s))
