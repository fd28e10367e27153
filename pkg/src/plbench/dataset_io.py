"""Plain-text serialization of sequences, trajectories, factor graphs and
per-frame statistics.

Formats are line-oriented, space-separated, with '#' comments. Floats are
written with ``repr`` (shortest exact form), so read(write(x)) recovers
every field bit-exactly. All pose records store the world-to-camera
transform (tx ty tz qx qy qz qw), the same convention used in memory.

Directory layout of a sequence:

    calib.txt            fx fy cx cy width height
    groundtruth.txt      frame_id tx ty tz qx qy qz qw
    frames/%06d.txt      P id ux uy d | L id sx sy sd ex ey ed
    landmarks.txt        MP id X Y Z | ML id sx sy sz ex ey ez
    parallel_groups.txt  PG gid id...
    stats.csv            (optional, via write_stats_csv)
    graph.txt            (optional, via write_graph)

Readers are total: malformed input of any kind raises ParseError naming
the file and line, never an unhandled exception.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .factor_graph import FactorGraph, LineFactor, LineVertex, PointFactor
from .geometry import (
    CameraIntrinsics,
    GeometryError,
    LineLandmark,
    LineMeasurement,
    PointLandmark,
    PointMeasurement,
    Pose,
)
from .simulator import FrameData, Sequence


class ParseError(ValueError):
    def __init__(self, path, line: int | None, message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


def _fmt(x: float) -> str:
    return repr(float(x))


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _iter_records(path):
    """Yield (lineno, tokens) for every non-comment, non-blank line.

    The file is decoded permissively; byte garbage becomes replacement
    characters that fail token parsing with a clean ParseError.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(path, None, f"cannot read: {exc}") from exc
    text = data.decode("utf-8", errors="replace")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        yield lineno, line.split()


def _parse_float(tok: str, path, lineno, what: str) -> float:
    try:
        v = float(tok)
    except ValueError as exc:
        raise ParseError(path, lineno, f"bad {what}: {tok!r}") from exc
    if not math.isfinite(v):
        raise ParseError(path, lineno, f"nonfinite {what}: {tok!r}")
    return v


def _parse_int(tok: str, path, lineno, what: str, minimum: int = 0) -> int:
    try:
        v = int(tok)
    except ValueError as exc:
        raise ParseError(path, lineno, f"bad {what}: {tok!r}") from exc
    if v < minimum:
        raise ParseError(path, lineno, f"{what} must be >= {minimum}: {v}")
    return v


def _expect(tokens, n, path, lineno):
    if len(tokens) != n:
        raise ParseError(path, lineno, f"expected {n} fields, got {len(tokens)}")


# ---------------------------------------------------------------------------
# trajectories


def write_trajectory(traj: list[Pose], path) -> None:
    """One line per frame: ``frame_id tx ty tz qx qy qz qw`` (T_cw)."""
    lines = ["# frame_id tx ty tz qx qy qz qw (world-to-camera)"]
    for i, T in enumerate(traj):
        fields = [str(i)] + [_fmt(v) for v in (*T.t, *T.q)]
        lines.append(" ".join(fields))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_trajectory(path) -> list[Pose]:
    traj: list[Pose] = []
    expected = 0
    for lineno, tokens in _iter_records(path):
        _expect(tokens, 8, path, lineno)
        frame_id = _parse_int(tokens[0], path, lineno, "frame_id")
        if frame_id != expected:
            raise ParseError(path, lineno, f"non-monotonic frame_id: {frame_id}")
        expected += 1
        vals = [_parse_float(t, path, lineno, "pose component") for t in tokens[1:]]
        q = np.array(vals[3:])
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ParseError(path, lineno, "quaternion is not unit norm")
        try:
            traj.append(Pose(q, np.array(vals[:3])))
        except GeometryError as exc:
            raise ParseError(path, lineno, str(exc)) from exc
    if not traj:
        raise ParseError(path, None, "empty trajectory")
    return traj


# ---------------------------------------------------------------------------
# sequences


def write_sequence(seq: Sequence, directory) -> None:
    directory = Path(directory)
    (directory / "frames").mkdir(parents=True, exist_ok=True)

    intr = seq.intrinsics
    _atomic_write(
        directory / "calib.txt",
        "# fx fy cx cy width height\n"
        + " ".join(
            [_fmt(intr.fx), _fmt(intr.fy), _fmt(intr.cx), _fmt(intr.cy),
             str(intr.width), str(intr.height)]
        )
        + "\n",
    )
    write_trajectory(seq.gt_trajectory, directory / "groundtruth.txt")

    lm_lines = ["# MP id X Y Z | ML id sx sy sz ex ey ez"]
    for pid in sorted(seq.gt_points):
        p = seq.gt_points[pid]
        lm_lines.append("MP " + str(pid) + " " + " ".join(_fmt(v) for v in p.position))
    for lid in sorted(seq.gt_lines):
        l = seq.gt_lines[lid]
        lm_lines.append(
            "ML "
            + str(lid)
            + " "
            + " ".join(_fmt(v) for v in (*l.endpoints[0], *l.endpoints[1]))
        )
    _atomic_write(directory / "landmarks.txt", "\n".join(lm_lines) + "\n")

    pg_lines = ["# PG group_id line_id..."]
    for gid in sorted(seq.parallel_groups):
        ids = seq.parallel_groups[gid]
        pg_lines.append("PG " + str(gid) + " " + " ".join(str(i) for i in ids))
    _atomic_write(directory / "parallel_groups.txt", "\n".join(pg_lines) + "\n")

    for f in seq.frames:
        rows = ["# P id ux uy d | L id sx sy sd ex ey ed"]
        for pm in f.points:
            rows.append(
                "P " + str(pm.landmark_id) + " " + " ".join(_fmt(v) for v in (*pm.u, pm.d))
            )
        for lm in f.lines:
            rows.append(
                "L "
                + str(lm.landmark_id)
                + " "
                + " ".join(
                    _fmt(v)
                    for v in (*lm.start.u, lm.start.d, *lm.end.u, lm.end.d)
                )
            )
        _atomic_write(directory / "frames" / f"{f.frame_id:06d}.txt", "\n".join(rows) + "\n")


def _read_calib(path) -> CameraIntrinsics:
    records = list(_iter_records(path))
    if len(records) != 1:
        raise ParseError(path, None, "calib.txt must hold exactly one record")
    lineno, tokens = records[0]
    _expect(tokens, 6, path, lineno)
    fx = _parse_float(tokens[0], path, lineno, "fx")
    fy = _parse_float(tokens[1], path, lineno, "fy")
    cx = _parse_float(tokens[2], path, lineno, "cx")
    cy = _parse_float(tokens[3], path, lineno, "cy")
    width = _parse_int(tokens[4], path, lineno, "width", minimum=1)
    height = _parse_int(tokens[5], path, lineno, "height", minimum=1)
    try:
        return CameraIntrinsics(fx, fy, cx, cy, width, height)
    except GeometryError as exc:
        raise ParseError(path, lineno, str(exc)) from exc


def read_sequence(directory, min_line_len: float = 15.0) -> Sequence:
    """Read a sequence directory, validating every invariant on the way."""
    directory = Path(directory)
    intr = _read_calib(directory / "calib.txt")
    traj = read_trajectory(directory / "groundtruth.txt")

    lm_path = directory / "landmarks.txt"
    gt_points: dict[int, PointLandmark] = {}
    gt_lines: dict[int, LineLandmark] = {}
    for lineno, tokens in _iter_records(lm_path):
        tag = tokens[0]
        if tag == "MP":
            _expect(tokens, 5, lm_path, lineno)
            pid = _parse_int(tokens[1], lm_path, lineno, "landmark id")
            if pid in gt_points:
                raise ParseError(lm_path, lineno, f"duplicate point landmark id {pid}")
            vals = [_parse_float(t, lm_path, lineno, "coordinate") for t in tokens[2:]]
            try:
                gt_points[pid] = PointLandmark(pid, np.array(vals))
            except GeometryError as exc:
                raise ParseError(lm_path, lineno, str(exc)) from exc
        elif tag == "ML":
            _expect(tokens, 8, lm_path, lineno)
            lid = _parse_int(tokens[1], lm_path, lineno, "landmark id")
            if lid in gt_lines:
                raise ParseError(lm_path, lineno, f"duplicate line landmark id {lid}")
            vals = [_parse_float(t, lm_path, lineno, "coordinate") for t in tokens[2:]]
            try:
                gt_lines[lid] = LineLandmark(lid, np.array(vals).reshape(2, 3))
            except GeometryError as exc:
                raise ParseError(lm_path, lineno, str(exc)) from exc
        else:
            raise ParseError(lm_path, lineno, f"unknown record tag {tag!r}")

    pg_path = directory / "parallel_groups.txt"
    parallel_groups: dict[int, list[int]] = {}
    if pg_path.exists():
        for lineno, tokens in _iter_records(pg_path):
            if tokens[0] != "PG":
                raise ParseError(pg_path, lineno, f"unknown record tag {tokens[0]!r}")
            if len(tokens) < 3:
                raise ParseError(pg_path, lineno, "PG needs a group id and at least one line id")
            gid = _parse_int(tokens[1], pg_path, lineno, "group id")
            if gid in parallel_groups:
                raise ParseError(pg_path, lineno, f"duplicate group id {gid}")
            ids = [_parse_int(t, pg_path, lineno, "line id") for t in tokens[2:]]
            for lid in ids:
                if lid not in gt_lines:
                    raise ParseError(pg_path, lineno, f"dangling line id {lid}")
            parallel_groups[gid] = ids

    frames_dir = directory / "frames"
    if not frames_dir.is_dir():
        raise ParseError(frames_dir, None, "missing frames directory")
    frames: list[FrameData] = []
    for frame_id in range(len(traj)):
        fpath = frames_dir / f"{frame_id:06d}.txt"
        if not fpath.exists():
            raise ParseError(fpath, None, f"missing frame file for frame {frame_id}")
        points: list[PointMeasurement] = []
        lines: list[LineMeasurement] = []
        for lineno, tokens in _iter_records(fpath):
            tag = tokens[0]
            if tag == "P":
                _expect(tokens, 5, fpath, lineno)
                pid = _parse_int(tokens[1], fpath, lineno, "landmark id")
                if pid not in gt_points:
                    raise ParseError(fpath, lineno, f"dangling landmark_id {pid}")
                vals = [_parse_float(t, fpath, lineno, "measurement value") for t in tokens[2:]]
                try:
                    pm = PointMeasurement(pid, np.array(vals[:2]), vals[2])
                except GeometryError as exc:
                    raise ParseError(fpath, lineno, str(exc)) from exc
                if not intr.contains(pm.u):
                    raise ParseError(fpath, lineno, "pixel outside the image")
                points.append(pm)
            elif tag == "L":
                _expect(tokens, 8, fpath, lineno)
                lid = _parse_int(tokens[1], fpath, lineno, "landmark id")
                if lid not in gt_lines:
                    raise ParseError(fpath, lineno, f"dangling landmark_id {lid}")
                vals = [_parse_float(t, fpath, lineno, "measurement value") for t in tokens[2:]]
                try:
                    lm = LineMeasurement(
                        lid,
                        PointMeasurement(lid, np.array(vals[0:2]), vals[2]),
                        PointMeasurement(lid, np.array(vals[3:5]), vals[5]),
                    )
                except GeometryError as exc:
                    raise ParseError(fpath, lineno, str(exc)) from exc
                if not (intr.contains(lm.start.u) and intr.contains(lm.end.u)):
                    raise ParseError(fpath, lineno, "endpoint pixel outside the image")
                if lm.length() < min_line_len:
                    raise ParseError(
                        fpath, lineno, f"line shorter than min_line_len={min_line_len}"
                    )
                lines.append(lm)
            else:
                raise ParseError(fpath, lineno, f"unknown record tag {tag!r}")
        frames.append(FrameData(frame_id, points, lines))

    seq = Sequence(
        intrinsics=intr,
        gt_trajectory=traj,
        frames=frames,
        gt_points=gt_points,
        gt_lines=gt_lines,
        parallel_groups=parallel_groups,
    )
    try:
        seq.validate(min_line_len=min_line_len)
    except ValueError as exc:
        raise ParseError(directory, None, str(exc)) from exc
    return seq


# ---------------------------------------------------------------------------
# per-frame statistics


CELL_SIZE = 10  # px, grid anchored at pixel (0, 0); half-open cells


@dataclass(frozen=True)
class FrameStats:
    frame_id: int
    num_points: int
    num_lines: int
    occupied_cells: int

    def __post_init__(self):
        if self.occupied_cells > self.num_points + 2 * self.num_lines:
            raise ValueError("more occupied cells than feature endpoints")


def compute_stats(seq: Sequence) -> list[FrameStats]:
    """Count features and occupied 10x10 px cells per frame.

    Only point positions and line endpoints occupy cells; line interiors
    do not. Cell index is (floor(x/10), floor(y/10)).
    """
    out = []
    for f in seq.frames:
        cells = set()
        for pm in f.points:
            cells.add((int(pm.u[0] // CELL_SIZE), int(pm.u[1] // CELL_SIZE)))
        for lm in f.lines:
            for u in (lm.start.u, lm.end.u):
                cells.add((int(u[0] // CELL_SIZE), int(u[1] // CELL_SIZE)))
        out.append(FrameStats(f.frame_id, len(f.points), len(f.lines), len(cells)))
    return out


def write_stats_csv(stats: list[FrameStats], path) -> None:
    rows = ["frame_id,num_points,num_lines,occupied_cells"]
    for s in stats:
        rows.append(f"{s.frame_id},{s.num_points},{s.num_lines},{s.occupied_cells}")
    _atomic_write(path, "\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# factor graphs


def write_graph(graph: FactorGraph, path) -> None:
    rows = [
        "# VERTEX_POSE id tx ty tz qx qy qz qw (world-to-camera)",
        "# VERTEX_POINT id X Y Z | VERTEX_LINE id nx ny nz dx dy dz",
        "# EDGE_POINT frame point px py | EDGE_LINE frame line sx sy ex ey | FIX id",
    ]
    for pid in sorted(graph.poses):
        T = graph.poses[pid]
        rows.append(
            "VERTEX_POSE " + str(pid) + " " + " ".join(_fmt(v) for v in (*T.t, *T.q))
        )
    for pid in sorted(graph.points):
        rows.append(
            "VERTEX_POINT " + str(pid) + " " + " ".join(_fmt(v) for v in graph.points[pid])
        )
    for lid in sorted(graph.lines):
        v = graph.lines[lid]
        rows.append(
            "VERTEX_LINE " + str(lid) + " " + " ".join(_fmt(x) for x in (*v.n, *v.d))
        )
    for pid in sorted(graph.fixed):
        rows.append("FIX " + str(pid))
    for f in graph.point_factors:
        rows.append(
            "EDGE_POINT " + f"{f.frame} {f.point} " + " ".join(_fmt(v) for v in f.u)
        )
    for f in graph.line_factors:
        rows.append(
            "EDGE_LINE "
            + f"{f.frame} {f.line} "
            + " ".join(_fmt(v) for v in (*f.u_start, *f.u_end))
        )
    _atomic_write(path, "\n".join(rows) + "\n")


def read_graph(path, intrinsics: CameraIntrinsics, sigma_s: float = 1.0) -> FactorGraph:
    """Graph files carry no calibration; the caller supplies it. Factor
    weights default to 1/sigma_s^2."""
    graph = FactorGraph(intrinsics=intrinsics)
    weight = 1.0 / (sigma_s * sigma_s)
    for lineno, tokens in _iter_records(path):
        tag = tokens[0]
        if tag == "VERTEX_POSE":
            _expect(tokens, 9, path, lineno)
            pid = _parse_int(tokens[1], path, lineno, "pose id")
            if pid in graph.poses:
                raise ParseError(path, lineno, f"duplicate pose id {pid}")
            vals = [_parse_float(t, path, lineno, "pose component") for t in tokens[2:]]
            q = np.array(vals[3:])
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise ParseError(path, lineno, "quaternion is not unit norm")
            graph.poses[pid] = Pose(q, np.array(vals[:3]))
        elif tag == "VERTEX_POINT":
            _expect(tokens, 5, path, lineno)
            pid = _parse_int(tokens[1], path, lineno, "point id")
            if pid in graph.points:
                raise ParseError(path, lineno, f"duplicate point id {pid}")
            vals = [_parse_float(t, path, lineno, "coordinate") for t in tokens[2:]]
            graph.points[pid] = np.array(vals)
        elif tag == "VERTEX_LINE":
            _expect(tokens, 8, path, lineno)
            lid = _parse_int(tokens[1], path, lineno, "line id")
            if lid in graph.lines:
                raise ParseError(path, lineno, f"duplicate line id {lid}")
            vals = [_parse_float(t, path, lineno, "coordinate") for t in tokens[2:]]
            n, d = np.array(vals[:3]), np.array(vals[3:])
            if np.linalg.norm(d) == 0.0:
                raise ParseError(path, lineno, "line direction must be nonzero")
            try:
                graph.lines[lid] = LineVertex(n, d)
            except ValueError as exc:
                raise ParseError(path, lineno, "Plucker constraint violated") from exc
        elif tag == "FIX":
            _expect(tokens, 2, path, lineno)
            graph.fixed.add(_parse_int(tokens[1], path, lineno, "pose id"))
        elif tag == "EDGE_POINT":
            _expect(tokens, 5, path, lineno)
            frame = _parse_int(tokens[1], path, lineno, "frame id")
            point = _parse_int(tokens[2], path, lineno, "point id")
            vals = [_parse_float(t, path, lineno, "pixel") for t in tokens[3:]]
            graph.point_factors.append(PointFactor(frame, point, np.array(vals), weight))
        elif tag == "EDGE_LINE":
            _expect(tokens, 7, path, lineno)
            frame = _parse_int(tokens[1], path, lineno, "frame id")
            line = _parse_int(tokens[2], path, lineno, "line id")
            vals = [_parse_float(t, path, lineno, "pixel") for t in tokens[3:]]
            graph.line_factors.append(
                LineFactor(frame, line, np.array(vals[:2]), np.array(vals[2:]), weight)
            )
        else:
            raise ParseError(path, lineno, f"unknown record tag {tag!r}")
    if graph.poses:
        try:
            graph.check()
        except ValueError as exc:
            raise ParseError(path, None, str(exc)) from exc
    return graph
