"""Synthetic scene/trajectory generation and measurement rendering.

Scenes are collections of axis-aligned boxes with point landmarks scattered
on the faces and line landmarks along edges and faces. Every line is
axis-aligned, so lines fall into up to three exactly-parallel groups (one
per world axis). Observations are exact re-projections filtered by a
depth window, the image bounds and ray/box occlusion; measurements are
observations corrupted by pixel noise and a disparity-based depth noise.

Determinism: all sampling comes from a counter-based 64-bit Philox stream
(Gaussians via numpy's ziggurat). Within one build, identical specs and
seeds give byte-identical sequences. Noise draws are consumed frame-major,
then points before lines, each ordered by ascending landmark id, with
(x, y, depth) per point record and (start, end) per line record. Draws are
consumed even when the resulting measurement is dropped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .geometry import (
    CameraIntrinsics,
    GeometryError,
    LineLandmark,
    LineMeasurement,
    PointLandmark,
    PointMeasurement,
    Pose,
)


class SceneError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class Box:
    """Axis-aligned cuboid: center and half-extents, meters."""

    center: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3).copy()
        e = np.asarray(self.extents, dtype=float).reshape(3).copy()
        if not np.all(e > 0):
            raise SceneError("box extents must be positive")
        c.flags.writeable = False
        e.flags.writeable = False
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "extents", e)

    @property
    def min(self) -> np.ndarray:
        return self.center - self.extents

    @property
    def max(self) -> np.ndarray:
        return self.center + self.extents

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(np.abs(p - self.center) <= self.extents + margin))


@dataclass(frozen=True)
class SceneSpec:
    boxes: tuple[Box, ...]
    points_per_face: float = 12.0  # count per square meter of face area
    lines_per_face: int = 2  # sampled surface lines per face, plus 12 edges per box
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if not self.boxes:
            raise SceneError("scene needs at least one box")
        if self.points_per_face < 0 or self.lines_per_face < 0:
            raise SceneError("densities must be nonnegative")
        for box in self.boxes:
            if box.contains(np.zeros(3)):
                raise SceneError("a box contains the world origin")
            # any box edge whose two transverse face coordinates are both
            # zero spans the world origin and would have a zero Plucker
            # moment; reject such layouts outright
            for axis in range(3):
                b, c = (axis + 1) % 3, (axis + 2) % 3
                for sb in (-1.0, 1.0):
                    for sc in (-1.0, 1.0):
                        fb = box.center[b] + sb * box.extents[b]
                        fc = box.center[c] + sc * box.extents[c]
                        if abs(fb) < 1e-9 and abs(fc) < 1e-9:
                            raise SceneError(
                                "box edge passes through the world origin; offset the box"
                            )


@dataclass(frozen=True)
class TrajectorySpec:
    """Camera path description; fields beyond the chosen kind are ignored.

    kinds:
      wave      sinusoidal lateral offset along the straight start->end path
      orbit     circle of ``radius`` around ``target`` at absolute ``height``
      corridor  rectangular circuit (legs ``leg_x`` x ``leg_y``), pure
                translation on legs, in-place corner turns at
                ``turn_rate_deg`` degrees per frame
    """

    kind: str
    frame_count: int
    lookat: str = "center"  # center | forward
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    start: tuple[float, float, float] = (-5.0, -4.0, 1.3)
    end: tuple[float, float, float] = (5.0, -4.0, 1.3)
    amplitude: float = 0.0
    wavelength: float = 2.0
    radius: float = 6.0
    height: float = 1.5
    leg_x: float = 8.0
    leg_y: float = 6.0
    turn_rate_deg: float = 18.0

    def __post_init__(self):
        if self.kind not in ("wave", "orbit", "corridor"):
            raise ConfigError(f"unknown trajectory kind {self.kind!r}")
        if self.frame_count < 2:
            raise ConfigError("frame_count must be >= 2")
        if self.lookat not in ("center", "forward"):
            raise ConfigError(f"unknown look-at policy {self.lookat!r}")


@dataclass(frozen=True)
class NoiseParams:
    """Pixel noise N(0, sigma_s^2 I); depth noise through the disparity
    model d = m / (m / (d_hat + a) + 0.5) with a ~ N(0, sigma_d^2)."""

    sigma_s: float = 1.0
    sigma_d: float = 1.0 / 6.0
    m: float = 35130.0
    enabled: bool = True

    def __post_init__(self):
        if self.sigma_s < 0 or self.sigma_d < 0 or self.m <= 0:
            raise ConfigError("invalid noise parameters")


@dataclass(frozen=True)
class RenderConfig:
    z_near: float = 0.1
    z_far: float = 20.0
    min_line_len: float = 15.0  # px, minimum clipped segment length


# ---------------------------------------------------------------------------
# scene construction

_FACES = [(0, -1.0), (0, 1.0), (1, -1.0), (1, 1.0), (2, -1.0), (2, 1.0)]


@dataclass
class Scene:
    boxes: tuple[Box, ...]
    points: list[PointLandmark]
    lines: list[LineLandmark]
    parallel_groups: dict[int, list[int]]  # group id -> line landmark ids
    seed: int = 0


def _box_edges(box: Box):
    """12 edges, canonical order, oriented along the positive axis."""
    lo, hi = box.min, box.max
    edges = []
    for axis in range(3):
        b, c = (axis + 1) % 3, (axis + 2) % 3
        for sb in (lo[b], hi[b]):
            for sc in (lo[c], hi[c]):
                p0 = np.empty(3)
                p1 = np.empty(3)
                p0[axis], p1[axis] = lo[axis], hi[axis]
                p0[b] = p1[b] = sb
                p0[c] = p1[c] = sc
                edges.append((axis, p0, p1))
    return edges


def build_scene(spec: SceneSpec) -> Scene:
    """Sample point/line landmarks on box surfaces from the seeded stream.

    Points lie exactly on faces. Lines are box edges plus axis-aligned
    segments sampled on faces; all direction vectors are exact unit axes,
    so the scene's parallel groups are exact by construction.
    """
    if spec.points_per_face == 0 and spec.lines_per_face == 0:
        raise SceneError("empty scene: zero point and line densities")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(spec.seed)))
    points: list[PointLandmark] = []
    lines: list[LineLandmark] = []
    groups: dict[int, list[int]] = {}

    for box in spec.boxes:
        lo, hi = box.min, box.max
        for axis, side in _FACES:
            b, c = (axis + 1) % 3, (axis + 2) % 3
            area = (hi[b] - lo[b]) * (hi[c] - lo[c])
            count = int(round(spec.points_per_face * area))
            if count > 0:
                uv = rng.uniform(size=(count, 2))
                for k in range(count):
                    p = np.empty(3)
                    p[axis] = hi[axis] if side > 0 else lo[axis]
                    p[b] = lo[b] + uv[k, 0] * (hi[b] - lo[b])
                    p[c] = lo[c] + uv[k, 1] * (hi[c] - lo[c])
                    points.append(PointLandmark(len(points), p))

    for box in spec.boxes:
        for axis, p0, p1 in _box_edges(box):
            lid = len(lines)
            lines.append(LineLandmark(lid, np.array([p0, p1]), group_id=axis))
            groups.setdefault(axis, []).append(lid)

    for box in spec.boxes:
        lo, hi = box.min, box.max
        for axis, side in _FACES:
            b, c = (axis + 1) % 3, (axis + 2) % 3
            for _ in range(spec.lines_per_face):
                for _attempt in range(16):
                    dir_axis, off_axis = (b, c) if rng.integers(2) == 0 else (c, b)
                    frac = rng.uniform(0.35, 0.9)
                    half = frac * (hi[dir_axis] - lo[dir_axis]) / 2.0
                    mid = rng.uniform(lo[dir_axis] + half, hi[dir_axis] - half)
                    off = rng.uniform(lo[off_axis], hi[off_axis])
                    p0 = np.empty(3)
                    p0[axis] = hi[axis] if side > 0 else lo[axis]
                    p0[dir_axis] = mid - half
                    p0[off_axis] = off
                    p1 = p0.copy()
                    p1[dir_axis] = mid + half
                    n = np.cross(p0, p1)
                    if np.linalg.norm(n) > 1e-9 * np.linalg.norm(p1 - p0):
                        lid = len(lines)
                        lines.append(LineLandmark(lid, np.array([p0, p1]), group_id=dir_axis))
                        groups.setdefault(dir_axis, []).append(lid)
                        break

    if not points and not lines:
        raise SceneError("empty scene: zero point and line densities")
    return Scene(spec.boxes, points, lines, groups, seed=spec.seed)


# ---------------------------------------------------------------------------
# trajectories


def _lookat_pose(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose with the optical axis through ``target``.

    Camera axes: x right, y down, z forward.
    """
    position = np.asarray(position, dtype=float)
    f = np.asarray(target, dtype=float) - position
    nf = np.linalg.norm(f)
    if nf < 1e-12:
        raise ConfigError("look-at target coincides with the camera position")
    f = f / nf
    up = np.asarray(up, dtype=float)
    x = np.cross(f, up)
    if np.linalg.norm(x) < 1e-9:  # looking straight up/down
        x = np.cross(f, np.array([0.0, 1.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(f, x)
    R_wc = np.column_stack([x, y, f])
    R_cw = R_wc.T
    return Pose.from_rt(R_cw, -R_cw @ position)


def _corridor_waypoints(spec: TrajectorySpec):
    """(position, heading) per frame for the rectangular circuit."""
    hx, hy = spec.leg_x / 2.0, spec.leg_y / 2.0
    z = spec.height
    corners = [
        np.array([-hx, -hy, z]),
        np.array([hx, -hy, z]),
        np.array([hx, hy, z]),
        np.array([-hx, hy, z]),
    ]
    headings = [
        np.array([1.0, 0.0, 0.0]),
        np.array([0.0, 1.0, 0.0]),
        np.array([-1.0, 0.0, 0.0]),
        np.array([0.0, -1.0, 0.0]),
    ]
    if spec.turn_rate_deg > 0:
        corner_frames = int(math.ceil(90.0 / spec.turn_rate_deg))
    else:
        corner_frames = 0  # instantaneous turns
    leg_budget = spec.frame_count - 4 * corner_frames
    if leg_budget < 4:
        raise ConfigError("frame_count too small for the corner turn rate")
    lengths = [spec.leg_x, spec.leg_y, spec.leg_x, spec.leg_y]
    total = sum(lengths)
    leg_frames = [max(1, int(round(leg_budget * L / total))) for L in lengths]
    leg_frames[3] += leg_budget - sum(leg_frames)
    if leg_frames[3] < 1:
        raise ConfigError("frame_count too small for the corridor circuit")

    frames = []
    for leg in range(4):
        a = corners[leg]
        bpt = corners[(leg + 1) % 4]
        h = headings[leg]
        n = leg_frames[leg]
        for k in range(n):
            frames.append((a + (bpt - a) * (k / n), h))
        # in-place turn at the far corner
        h_next = headings[(leg + 1) % 4]
        for k in range(1, corner_frames + 1):
            ang = math.radians(min(k * spec.turn_rate_deg, 90.0))
            c, s = math.cos(ang), math.sin(ang)
            heading = np.array(
                [c * h[0] - s * h[1], s * h[0] + c * h[1], 0.0]
            )
            if k == corner_frames:
                heading = h_next
            frames.append((bpt.copy(), heading))
    return frames[: spec.frame_count]


def build_trajectory(spec: TrajectorySpec) -> list[Pose]:
    n = spec.frame_count
    target = np.asarray(spec.target, dtype=float)
    poses: list[Pose] = []

    if spec.kind == "wave":
        start = np.asarray(spec.start, dtype=float)
        end = np.asarray(spec.end, dtype=float)
        path = end - start
        length = float(np.linalg.norm(path))
        if length < 1e-9:
            raise ConfigError("wave path start and end coincide")
        direction = path / length
        lateral = np.cross(np.array([0.0, 0.0, 1.0]), direction)
        if np.linalg.norm(lateral) < 1e-9:
            raise ConfigError("wave path must not be vertical")
        lateral = lateral / np.linalg.norm(lateral)
        for i in range(n):
            f = i / (n - 1)
            arc = f * length
            p = start + f * path + spec.amplitude * math.sin(
                2.0 * math.pi * arc / spec.wavelength
            ) * lateral
            if spec.lookat == "forward":
                poses.append(_lookat_pose(p, p + direction))
            else:
                poses.append(_lookat_pose(p, target))

    elif spec.kind == "orbit":
        for i in range(n):
            theta = 2.0 * math.pi * i / n
            p = np.array(
                [
                    target[0] + spec.radius * math.cos(theta),
                    target[1] + spec.radius * math.sin(theta),
                    spec.height,
                ]
            )
            poses.append(_lookat_pose(p, target))

    else:  # corridor
        for p, heading in _corridor_waypoints(spec):
            if spec.lookat == "center":
                poses.append(_lookat_pose(p, target))
            else:
                poses.append(_lookat_pose(p, p + heading))

    return poses


# ---------------------------------------------------------------------------
# visibility


def _ray_box_chord(center, targets, box: Box):
    """Interior chord length, in units of the segment center->target,
    that the rays cover strictly before reaching their targets.

    Slab method; a zero direction component means the ray lies inside or
    outside that slab for its whole length.
    """
    C = np.asarray(center, dtype=float)
    D = np.asarray(targets, dtype=float) - C  # (N, 3)
    lo = box.min - C
    hi = box.max - C
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = lo / D
        t2 = hi / D
    zero = D == 0.0
    inside = (lo <= 0.0) & (hi >= 0.0)
    t1 = np.where(zero, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(zero, np.where(inside, np.inf, -np.inf), t2)
    t_enter = np.max(np.minimum(t1, t2), axis=-1)
    t_exit = np.min(np.maximum(t1, t2), axis=-1)
    a = np.maximum(t_enter, 0.0)
    b = np.minimum(t_exit, 1.0 - 1e-9)
    return np.maximum(b - a, 0.0)


def occluded(center, targets, boxes) -> np.ndarray:
    """True where the open segment camera->target crosses any box interior."""
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    mask = np.zeros(len(targets), dtype=bool)
    for box in boxes:
        mask |= _ray_box_chord(center, targets, box) > 1e-9
    return mask


@dataclass
class FrameObservations:
    """Exact (noise-free) visible observations of one frame."""

    points: list[PointMeasurement]
    lines: list[LineMeasurement]


def _clip_segment_2d(u1, u2, xmin, ymin, xmax, ymax):
    """Liang-Barsky clip of [u1, u2] against [xmin, xmax] x [ymin, ymax].

    Returns (tau0, tau1) parameters along the 2D segment or None.
    """
    d = u2 - u1
    t0, t1 = 0.0, 1.0
    for p, q in (
        (-d[0], u1[0] - xmin),
        (d[0], xmax - u1[0]),
        (-d[1], u1[1] - ymin),
        (d[1], ymax - u1[1]),
    ):
        if p == 0.0:
            if q < 0.0:
                return None
            continue
        r = q / p
        if p < 0.0:
            if r > t1:
                return None
            t0 = max(t0, r)
        else:
            if r < t0:
                return None
            t1 = min(t1, r)
    if t0 >= t1:
        return None
    return t0, t1


def render_frame(
    scene: Scene,
    pose: Pose,
    intr: CameraIntrinsics,
    cfg: RenderConfig = RenderConfig(),
) -> FrameObservations:
    """Exact observations of the scene from one pose.

    A point is observed when its depth lies in [z_near, z_far], its
    projection falls inside the image and no box interior blocks the ray.
    Line segments are clipped against the z_near plane and the image
    rectangle (depths recomputed at clip points); both clipped endpoints
    must pass the point test and the clipped 2D length must reach
    min_line_len.
    """
    R = pose.rotation()
    cam_center = pose.center()
    obs_points: list[PointMeasurement] = []
    obs_lines: list[LineMeasurement] = []

    if scene.points:
        P_w = np.array([p.position for p in scene.points])
        P_c = P_w @ R.T + pose.t
        z = P_c[:, 2]
        ok = (z >= cfg.z_near) & (z <= cfg.z_far)
        u = np.full((len(P_w), 2), np.nan)
        np.divide(P_c[:, 0], z, out=u[:, 0], where=ok)
        np.divide(P_c[:, 1], z, out=u[:, 1], where=ok)
        u[:, 0] = intr.fx * u[:, 0] + intr.cx
        u[:, 1] = intr.fy * u[:, 1] + intr.cy
        ok &= intr.contains(u)
        if np.any(ok):
            idx = np.nonzero(ok)[0]
            occ = occluded(cam_center, P_w[idx], scene.boxes)
            for j, i in enumerate(idx):
                if not occ[j]:
                    obs_points.append(
                        PointMeasurement(scene.points[i].id, u[i], float(z[i]))
                    )

    # clip box shrunk by a margin on every side: endpoint pixels are
    # re-projected from the 3D clip points and drift by ~1e-13 px
    xmin = ymin = 1e-6
    xmax = intr.width - 1e-6
    ymax = intr.height - 1e-6
    R_inv = R.T
    for line in scene.lines:
        A_c = R @ line.endpoints[0] + pose.t
        B_c = R @ line.endpoints[1] + pose.t
        zA, zB = A_c[2], B_c[2]
        if zA < cfg.z_near and zB < cfg.z_near:
            continue
        if zA < cfg.z_near or zB < cfg.z_near:
            s = (cfg.z_near - zA) / (zB - zA)
            Pn = A_c + s * (B_c - A_c)
            if zA < cfg.z_near:
                A_c = Pn
            else:
                B_c = Pn
            zA, zB = A_c[2], B_c[2]
        u1 = np.array([intr.fx * A_c[0] / zA + intr.cx, intr.fy * A_c[1] / zA + intr.cy])
        u2 = np.array([intr.fx * B_c[0] / zB + intr.cx, intr.fy * B_c[1] / zB + intr.cy])
        clip = _clip_segment_2d(u1, u2, xmin, ymin, xmax, ymax)
        if clip is None:
            continue
        ends = []
        valid = True
        for tau in clip:
            denom = zB + tau * (zA - zB)
            if denom <= 0:
                valid = False
                break
            s = tau * zA / denom
            P_cs = A_c + s * (B_c - A_c)
            zs = P_cs[2]
            if not (cfg.z_near - 1e-9 <= zs <= cfg.z_far):
                valid = False
                break
            us = np.array(
                [intr.fx * P_cs[0] / zs + intr.cx, intr.fy * P_cs[1] / zs + intr.cy]
            )
            P_ws = R_inv @ (P_cs - pose.t)
            ends.append((us, float(zs), P_ws))
        if not valid or len(ends) != 2:
            continue
        if np.linalg.norm(ends[1][0] - ends[0][0]) < cfg.min_line_len:
            continue
        if np.any(occluded(cam_center, np.array([ends[0][2], ends[1][2]]), scene.boxes)):
            continue
        obs_lines.append(
            LineMeasurement(
                line.id,
                PointMeasurement(line.id, ends[0][0], ends[0][1]),
                PointMeasurement(line.id, ends[1][0], ends[1][1]),
            )
        )

    return FrameObservations(obs_points, obs_lines)


# ---------------------------------------------------------------------------
# noise model


def perturb_pixel(u, sigma_s: float, rng) -> np.ndarray:
    """u + alpha with alpha ~ N(0, sigma_s^2 I); draws x then y."""
    if sigma_s < 0:
        raise ConfigError("sigma_s must be nonnegative")
    ax = rng.normal(0.0, sigma_s)
    ay = rng.normal(0.0, sigma_s)
    return np.asarray(u, dtype=float) + np.array([ax, ay])


def perturb_depth(d_hat: float, sigma_d: float, m_const: float, rng) -> float | None:
    """Disparity-domain depth noise d = m / (m / (d_hat + a) + 0.5).

    One Gaussian draw is always consumed; returns None when the noisy
    depth is nonpositive or nonfinite (the caller drops the measurement).
    """
    if d_hat <= 0:
        raise GeometryError("depth must be positive")
    a = rng.normal(0.0, sigma_d)
    shifted = d_hat + a
    if shifted <= 0:
        return None
    denom = m_const / shifted + 0.5
    if denom <= 0:
        return None
    d = m_const / denom
    if not np.isfinite(d) or d <= 0:
        return None
    return float(d)


# ---------------------------------------------------------------------------
# sequences


@dataclass
class FrameData:
    frame_id: int
    points: list[PointMeasurement]
    lines: list[LineMeasurement]


@dataclass
class GenerationReport:
    dropped_points: int = 0
    dropped_lines: int = 0
    empty_frames: list[int] = field(default_factory=list)


@dataclass(eq=False)
class Sequence:
    """A generated benchmark sequence: calibration, ground truth and
    per-frame measurements. ``report`` is generation metadata and is not
    serialized."""

    intrinsics: CameraIntrinsics
    gt_trajectory: list[Pose]
    frames: list[FrameData]
    gt_points: dict[int, PointLandmark]
    gt_lines: dict[int, LineLandmark]
    parallel_groups: dict[int, list[int]]
    report: GenerationReport | None = None

    def validate(self, min_line_len: float = 0.0) -> None:
        if len(self.frames) != len(self.gt_trajectory):
            raise ValueError("frame count does not match trajectory length")
        for f in self.frames:
            for pm in f.points:
                if pm.landmark_id not in self.gt_points:
                    raise ValueError(f"dangling point landmark id {pm.landmark_id}")
                if not self.intrinsics.contains(pm.u):
                    raise ValueError("point measurement outside the image")
            for lm in f.lines:
                if lm.landmark_id not in self.gt_lines:
                    raise ValueError(f"dangling line landmark id {lm.landmark_id}")
                if not (
                    self.intrinsics.contains(lm.start.u) and self.intrinsics.contains(lm.end.u)
                ):
                    raise ValueError("line measurement outside the image")
                if lm.length() < min_line_len:
                    raise ValueError("line measurement shorter than min_line_len")
        for gid, ids in self.parallel_groups.items():
            dirs = []
            for lid in ids:
                if lid not in self.gt_lines:
                    raise ValueError(f"dangling line id {lid} in parallel group {gid}")
                dirs.append(self.gt_lines[lid].direction())
            for d in dirs[1:]:
                c = np.linalg.norm(np.cross(dirs[0], d))
                if abs(np.arctan2(c, abs(dirs[0] @ d))) > 1e-9:
                    raise ValueError(f"parallel group {gid} members disagree in direction")

    def point_tracks(self) -> dict[int, list[int]]:
        tracks: dict[int, list[int]] = {}
        for f in self.frames:
            for pm in f.points:
                tracks.setdefault(pm.landmark_id, []).append(f.frame_id)
        return tracks

    def line_tracks(self) -> dict[int, list[int]]:
        tracks: dict[int, list[int]] = {}
        for f in self.frames:
            for lm in f.lines:
                tracks.setdefault(lm.landmark_id, []).append(f.frame_id)
        return tracks


def generate_sequence(
    scene: Scene,
    trajectory: list[Pose],
    noise: NoiseParams,
    intr: CameraIntrinsics,
    cfg: RenderConfig = RenderConfig(),
    noise_seed: int | None = None,
) -> Sequence:
    """Render every frame and corrupt surviving observations with noise.

    The noise stream defaults to a child of the scene seed so that one
    top-level seed reproduces the whole sequence. Noisy measurements that
    leave the image, lose positive depth or shrink below min_line_len are
    dropped and counted in the report.
    """
    if noise_seed is None:
        seed_seq = np.random.SeedSequence(entropy=scene.seed, spawn_key=(1,))
    else:
        seed_seq = np.random.SeedSequence(noise_seed)
    rng = np.random.Generator(np.random.Philox(seed_seq))

    report = GenerationReport()
    frames: list[FrameData] = []
    for frame_id, pose in enumerate(trajectory):
        obs = render_frame(scene, pose, intr, cfg)
        pts: list[PointMeasurement] = []
        lns: list[LineMeasurement] = []
        if not noise.enabled:
            pts = sorted(obs.points, key=lambda p: p.landmark_id)
            lns = sorted(obs.lines, key=lambda l: l.landmark_id)
        else:
            for pm in sorted(obs.points, key=lambda p: p.landmark_id):
                u = perturb_pixel(pm.u, noise.sigma_s, rng)
                d = perturb_depth(pm.d, noise.sigma_d, noise.m, rng)
                if d is None or not intr.contains(u):
                    report.dropped_points += 1
                    continue
                pts.append(PointMeasurement(pm.landmark_id, u, d))
            for lm in sorted(obs.lines, key=lambda l: l.landmark_id):
                u_s = perturb_pixel(lm.start.u, noise.sigma_s, rng)
                d_s = perturb_depth(lm.start.d, noise.sigma_d, noise.m, rng)
                u_e = perturb_pixel(lm.end.u, noise.sigma_s, rng)
                d_e = perturb_depth(lm.end.d, noise.sigma_d, noise.m, rng)
                if (
                    d_s is None
                    or d_e is None
                    or not intr.contains(u_s)
                    or not intr.contains(u_e)
                    or np.linalg.norm(u_e - u_s) < cfg.min_line_len
                ):
                    report.dropped_lines += 1
                    continue
                lns.append(
                    LineMeasurement(
                        lm.landmark_id,
                        PointMeasurement(lm.landmark_id, u_s, d_s),
                        PointMeasurement(lm.landmark_id, u_e, d_e),
                    )
                )
        if not pts and not lns:
            report.empty_frames.append(frame_id)
        frames.append(FrameData(frame_id, pts, lns))

    return Sequence(
        intrinsics=intr,
        gt_trajectory=list(trajectory),
        frames=frames,
        gt_points={p.id: p for p in scene.points},
        gt_lines={l.id: l for l in scene.lines},
        parallel_groups={g: list(ids) for g, ids in scene.parallel_groups.items()},
        report=report,
    )


# ---------------------------------------------------------------------------
# presets / config files


@dataclass(frozen=True)
class BenchmarkConfig:
    intrinsics: CameraIntrinsics
    scene: SceneSpec
    trajectory: TrajectorySpec
    noise: NoiseParams
    render: RenderConfig


def parse_config(text: str) -> BenchmarkConfig:
    """Parse the plain-text ``key = value`` preset format ('#' comments).

    The ``box`` key may repeat; its value is six floats
    ``cx cy cz ex ey ez`` (center and half-extents).
    """
    values: dict[str, str] = {}
    boxes: list[Box] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key == "box":
            parts = value.split()
            if len(parts) != 6:
                raise ConfigError(f"line {lineno}: box needs 6 numbers")
            nums = [float(p) for p in parts]
            boxes.append(Box(np.array(nums[:3]), np.array(nums[3:])))
        else:
            values[key] = value

    def get(key, default=None, cast=float):
        if key not in values:
            if default is None:
                raise ConfigError(f"missing config key {key!r}")
            return default
        try:
            return cast(values[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {values[key]!r}") from exc

    def get_vec3(key, default):
        if key not in values:
            return default
        parts = values[key].split()
        if len(parts) != 3:
            raise ConfigError(f"{key!r} needs 3 numbers")
        return tuple(float(p) for p in parts)

    def get_bool(key, default):
        if key not in values:
            return default
        v = values[key].lower()
        if v in ("on", "true", "1", "yes"):
            return True
        if v in ("off", "false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {key!r}: {values[key]!r}")

    intr = CameraIntrinsics(
        fx=get("camera.fx"),
        fy=get("camera.fy"),
        cx=get("camera.cx"),
        cy=get("camera.cy"),
        width=get("camera.width", cast=int),
        height=get("camera.height", cast=int),
    )
    if not boxes:
        raise ConfigError("config declares no boxes")
    scene = SceneSpec(
        boxes=tuple(boxes),
        points_per_face=get("scene.points_per_face", 12.0),
        lines_per_face=get("scene.lines_per_face", 2, cast=int),
        seed=get("scene.seed", 0, cast=int),
    )
    traj = TrajectorySpec(
        kind=get("trajectory.kind", cast=str),
        frame_count=get("trajectory.frames", cast=int),
        lookat=get("trajectory.lookat", "center", cast=str),
        target=get_vec3("trajectory.target", (0.0, 0.0, 0.0)),
        start=get_vec3("trajectory.start", (-5.0, -4.0, 1.3)),
        end=get_vec3("trajectory.end", (5.0, -4.0, 1.3)),
        amplitude=get("trajectory.amplitude", 0.0),
        wavelength=get("trajectory.wavelength", 2.0),
        radius=get("trajectory.radius", 6.0),
        height=get("trajectory.height", 1.5),
        leg_x=get("trajectory.leg_x", 8.0),
        leg_y=get("trajectory.leg_y", 6.0),
        turn_rate_deg=get("trajectory.turn_rate", 18.0),
    )
    noise = NoiseParams(
        sigma_s=get("noise.sigma_s", 1.0),
        sigma_d=get("noise.sigma_d", 1.0 / 6.0),
        m=get("noise.m", 35130.0),
        enabled=get_bool("noise.enabled", True),
    )
    render = RenderConfig(
        z_near=get("render.z_near", 0.1),
        z_far=get("render.z_far", 20.0),
        min_line_len=get("render.min_line_len", 15.0),
    )
    return BenchmarkConfig(intr, scene, traj, noise, render)


PRESET_NAMES = ("sphere", "box", "corridor")


def load_preset(name_or_path: str) -> BenchmarkConfig:
    """Load a shipped preset by name or any config file by path."""
    if name_or_path in PRESET_NAMES:
        text = (
            resources.files("plbench").joinpath(f"presets/{name_or_path}.cfg").read_text()
        )
    else:
        try:
            with open(name_or_path, "rb") as fh:
                text = fh.read().decode("utf-8", errors="replace")
        except OSError as exc:
            raise ConfigError(f"cannot read preset {name_or_path!r}: {exc}") from exc
    return parse_config(text)
