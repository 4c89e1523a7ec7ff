"""Scan accuracy pipeline: clouds, trimmed ICP, joint metrics, statistics.

Clouds are meters.  Reported metrics are millimeters and degrees.  The carved
surface sampler lives here so both the nominal reference cloud and the
simulator's synthetic scans share one construction: box faces minus executed
notches and hole openings, plus the executed cut faces, plus optional dowel
cylinders standing proud of executed holes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .acim import CutJoint, ExecutionModel, Hole, PlanarFace
from .geometry import Plane, Pose, angle_between, quat_from_matrix

__all__ = [
    "EvaluateError",
    "PlyFormatError",
    "EmptySegment",
    "NonConvergence",
    "DegenerateFit",
    "PointCloud",
    "dump_ply",
    "parse_ply",
    "save_ply",
    "load_ply",
    "carve_sample",
    "sample_model_cloud",
    "IcpResult",
    "icp_register",
    "segment_joint",
    "joint_location_error",
    "joint_face_error",
    "segment_dowel",
    "perforation_errors",
    "JointErrorReport",
    "PerforationReport",
    "StatsRow",
    "StatsTable",
    "sawing_angle_deg",
    "summarize",
    "stats_csv",
    "boxplot_csv",
    "LENGTH_BINS",
    "ANGLE_BINS",
]

MM = 1000.0

LENGTH_BINS = (1.0, 1.5, 1.9, 2.4, 2.9, 3.3, 3.8)
ANGLE_BINS = (30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0)


class EvaluateError(Exception):
    """Base class for evaluation failures."""


class PlyFormatError(EvaluateError):
    """Raised on malformed PLY content."""


class EmptySegment(EvaluateError):
    """Raised when a segmentation yields no points (scan coverage gap)."""


class NonConvergence(EvaluateError):
    """Raised when ICP hits the iteration cap while still moving."""


class DegenerateFit(EvaluateError):
    """Raised when a dowel cloud is too small or isotropic for a line fit."""


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise EvaluateError("point cloud contains non-finite coordinates")
        self.points = pts
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if nrm.shape[0] != pts.shape[0]:
                raise EvaluateError("normals count differs from points count")
            self.normals = nrm

    def __len__(self) -> int:
        return self.points.shape[0]

    @staticmethod
    def merge(clouds: list["PointCloud"]) -> "PointCloud":
        clouds = [c for c in clouds if len(c) > 0]
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.vstack([c.points for c in clouds])
        if all(c.normals is not None for c in clouds):
            return PointCloud(pts, np.vstack([c.normals for c in clouds]))
        return PointCloud(pts)


def dump_ply(cloud: PointCloud) -> str:
    """ASCII PLY, 6-decimal meters; byte-stable for round-trips."""
    with_n = cloud.normals is not None
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if with_n:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines.append("end_header")
    for i in range(len(cloud)):
        row = list(cloud.points[i]) + (list(cloud.normals[i]) if with_n else [])
        lines.append(" ".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"


def parse_ply(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyFormatError("missing ply magic line")
    count = None
    props: list[str] = []
    body_start = None
    for i, ln in enumerate(lines[1:], start=1):
        token = ln.strip().split()
        if not token:
            continue
        if token[0] == "format":
            if token[1] != "ascii":
                raise PlyFormatError("only ascii PLY is supported")
        elif token[0] == "element":
            if token[1] != "vertex":
                raise PlyFormatError(f"unsupported element '{token[1]}'")
            count = int(token[2])
        elif token[0] == "property":
            props.append(token[-1])
        elif token[0] == "end_header":
            body_start = i + 1
            break
    if count is None or body_start is None:
        raise PlyFormatError("header missing element count or end_header")
    expect = ["x", "y", "z"]
    with_n = props == ["x", "y", "z", "nx", "ny", "nz"]
    if props != expect and not with_n:
        raise PlyFormatError(f"unsupported property layout {props}")
    rows = []
    for j, ln in enumerate(lines[body_start : body_start + count]):
        vals = ln.split()
        if len(vals) != len(props):
            raise PlyFormatError(f"vertex line {j}: expected {len(props)} values")
        try:
            rows.append([float(v) for v in vals])
        except ValueError as exc:
            raise PlyFormatError(f"vertex line {j}: non-numeric value") from exc
    if len(rows) != count:
        raise PlyFormatError(f"expected {count} vertices, found {len(rows)}")
    arr = np.array(rows, dtype=float).reshape(-1, len(props))
    if with_n:
        return PointCloud(arr[:, :3], arr[:, 3:])
    return PointCloud(arr[:, :3] if count else np.zeros((0, 3)))


def save_ply(cloud: PointCloud, path) -> None:
    from pathlib import Path

    Path(path).write_text(dump_ply(cloud), encoding="utf-8")


def load_ply(path) -> PointCloud:
    from pathlib import Path

    return parse_ply(Path(path).read_text(encoding="utf-8"))


def _sample_rect(rng, center, eu, ev, normal, count):
    """Uniform points on a rectangle spanned by full-extent edge vectors."""
    if count <= 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)
    pts = center + np.outer(u, eu) + np.outer(v, ev)
    return pts, np.tile(normal, (count, 1))


def _sample_polygon(rng, polygon, count):
    """Uniform points over a convex polygon via fan triangulation."""
    if count <= 0:
        return np.zeros((0, 3))
    v0 = polygon[0]
    tris = [(v0, polygon[i], polygon[i + 1]) for i in range(1, len(polygon) - 1)]
    areas = np.array(
        [0.5 * np.linalg.norm(np.cross(b - a, c - a)) for a, b, c in tris]
    )
    total = areas.sum()
    if total <= 0:
        return np.zeros((0, 3))
    picks = rng.choice(len(tris), size=count, p=areas / total)
    u = rng.uniform(size=count)
    v = rng.uniform(size=count)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    out = np.empty((count, 3))
    for i, t in enumerate(picks):
        a, b, c = tris[t]
        out[i] = a + u[i] * (b - a) + v[i] * (c - a)
    return out


def polygon_area(polygon: np.ndarray) -> float:
    v0 = polygon[0]
    return float(
        sum(
            0.5 * np.linalg.norm(np.cross(polygon[i] - v0, polygon[i + 1] - v0))
            for i in range(1, len(polygon) - 1)
        )
    )


def _box_faces(solid):
    l, w, h = solid.length, solid.width, solid.height
    x, y, z = np.eye(3)
    return [
        (np.array([l / 2, 0, 0]), y * w, z * h, x, w * h),
        (np.array([-l / 2, 0, 0]), y * w, z * h, -x, w * h),
        (np.array([0, w / 2, 0]), x * l, z * h, y, l * h),
        (np.array([0, -w / 2, 0]), x * l, z * h, -y, l * h),
        (np.array([0, 0, h / 2]), x * l, y * w, z, l * w),
        (np.array([0, 0, -h / 2]), x * l, y * w, -z, l * w),
    ]


def carve_sample(
    model: ExecutionModel,
    density: float,
    rng,
    cut_planes: dict[str, Plane] | None = None,
    hole_rays: dict[str, tuple[np.ndarray, np.ndarray, float]] | None = None,
    sigma: float = 0.0,
    dowels: bool = False,
    dowel_protrusion: float = 0.02,
    dowel_density: float | None = None,
) -> PointCloud:
    """Sampled surface of the beam with the given components executed.

    ``cut_planes`` maps face ids to achieved planes; a joint is carved only
    when every one of its faces appears.  ``hole_rays`` maps hole ids to
    (start, unit direction, depth).  Waste volumes are intersections of the
    positive half-spaces of a joint's face planes, which covers convex
    notches and end cuts.  ``dowel_density`` lets dowel cylinders be swept
    more densely than the rest (line fits need tens of thousands of points
    to beat their sampling noise floor).
    """
    if density <= 0:
        raise EvaluateError("density must be positive")
    if dowel_density is None:
        dowel_density = density
    cut_planes = cut_planes or {}
    hole_rays = hole_rays or {}

    carved_joints: list[tuple[CutJoint, list[Plane]]] = []
    for joint in model.cuts:
        if all(f.face_id in cut_planes for f in joint.faces):
            carved_joints.append((joint, [cut_planes[f.face_id] for f in joint.faces]))

    def in_waste(pts: np.ndarray) -> np.ndarray:
        flags = np.zeros(pts.shape[0], dtype=bool)
        for _, planes in carved_joints:
            inside = np.ones(pts.shape[0], dtype=bool)
            for plane in planes:
                inside &= plane.signed_distance(pts) > 1e-9
            flags |= inside
        return flags

    def near_hole(pts: np.ndarray) -> np.ndarray:
        flags = np.zeros(pts.shape[0], dtype=bool)
        for hole in model.holes:
            ray = hole_rays.get(hole.hole_id)
            if ray is None:
                continue
            start, direction, depth = ray
            rel = pts - start
            t = np.clip(rel @ direction, 0.0, depth)
            closest = start + np.outer(t, direction)
            flags |= np.linalg.norm(pts - closest, axis=1) <= hole.radius
        return flags

    clouds = []
    for center, eu, ev, normal, area in _box_faces(model.solid):
        pts, nrm = _sample_rect(rng, center, eu, ev, normal, round(area * density))
        keep = ~(in_waste(pts) | near_hole(pts))
        clouds.append(PointCloud(pts[keep], nrm[keep]))

    for joint, _ in carved_joints:
        for face in joint.faces:
            plane = cut_planes[face.face_id]
            count = round(polygon_area(face.polygon) * density)
            pts = _sample_polygon(rng, face.polygon, count)
            pts = plane.project(pts) if count else pts
            clouds.append(PointCloud(pts, np.tile(plane.normal, (len(pts), 1))))

    if dowels:
        for hole in model.holes:
            ray = hole_rays.get(hole.hole_id)
            if ray is None:
                continue
            start, direction, depth = ray
            span = depth + dowel_protrusion
            count = round(2 * math.pi * hole.radius * span * dowel_density)
            if count <= 0:
                continue
            u = np.zeros(3)
            u[np.argmin(np.abs(direction))] = 1.0
            u = np.cross(direction, u)
            u /= np.linalg.norm(u)
            v = np.cross(direction, u)
            z = rng.uniform(-dowel_protrusion, depth, size=count)
            th = rng.uniform(0.0, 2 * math.pi, size=count)
            radial = np.outer(np.cos(th), u) + np.outer(np.sin(th), v)
            pts = start + np.outer(z, direction) + hole.radius * radial
            clouds.append(PointCloud(pts, radial))

    cloud = PointCloud.merge(clouds)
    if sigma > 0 and len(cloud):
        cloud = PointCloud(
            cloud.points + rng.normal(scale=sigma, size=(len(cloud), 1)) * cloud.normals,
            cloud.normals,
        )
    return cloud


def _nominal_planes(model: ExecutionModel) -> dict[str, Plane]:
    return {f.face_id: f.plane for c in model.cuts for f in c.faces}


def _nominal_rays(model: ExecutionModel):
    return {h.hole_id: (h.start, h.axis, h.depth) for h in model.holes}


def sample_model_cloud(model: ExecutionModel, density: float, seed: int = 0) -> PointCloud:
    """Reference cloud: nominal solid with every cut and hole applied."""
    rng = np.random.default_rng([seed, 900])
    return carve_sample(
        model, density, rng, _nominal_planes(model), _nominal_rays(model)
    )


@dataclass(frozen=True)
class IcpResult:
    pose: Pose
    rmse: float
    iterations: int


def _kabsch(a: np.ndarray, b: np.ndarray) -> Pose:
    """Rigid transform minimizing ||R a + t - b||."""
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(quat_from_matrix(r), cb - r @ ca)


def icp_register(
    scan: PointCloud,
    reference: PointCloud,
    init: Pose | None = None,
    max_iters: int = 50,
    trim_fraction: float = 0.10,
    tol: float = 1e-6,
) -> IcpResult:
    """Trimmed point-to-point ICP aligning scan onto reference."""
    if len(scan) == 0 or len(reference) == 0:
        raise EvaluateError("icp needs nonempty clouds")
    pose = Pose.identity() if init is None else init
    tree = cKDTree(reference.points)
    keep = max(4, int(math.ceil(len(scan) * (1.0 - trim_fraction))))

    def trimmed_rmse(p):
        dists, idx = tree.query(p.apply(scan.points))
        order = np.argsort(dists, kind="stable")[:keep]
        return float(np.sqrt(np.mean(dists[order] ** 2))), order, idx

    prev_rmse = math.inf
    for it in range(1, max_iters + 1):
        rmse, order, idx = trimmed_rmse(pose)
        if abs(prev_rmse - rmse) < tol:
            return IcpResult(pose, rmse, it)
        pose = _kabsch(scan.points[order], reference.points[idx[order]])
        prev_rmse = rmse
    final_rmse, _, _ = trimmed_rmse(pose)
    if abs(prev_rmse - final_rmse) >= 1e-4:
        raise NonConvergence(f"icp still moving after {max_iters} iterations")
    return IcpResult(pose, final_rmse, max_iters)


def _face_mask(
    points: np.ndarray, face: PlanarFace, max_dist: float, inflate: float
) -> np.ndarray:
    """Points within max_dist of the face plane and inside the polygon
    outline inflated (positive) or inset (negative) by ``inflate``."""
    plane = face.plane
    mask = np.abs(plane.signed_distance(points)) <= max_dist
    poly = face.polygon
    n = plane.normal
    for i in range(poly.shape[0]):
        a = poly[i]
        b = poly[(i + 1) % poly.shape[0]]
        edge = b - a
        inward = np.cross(n, edge)
        norm = np.linalg.norm(inward)
        if norm < 1e-12:
            continue
        inward /= norm
        mask &= (points - a) @ inward >= -inflate
    return mask


def segment_joint(
    scan: PointCloud, model: ExecutionModel, joint_id: str, margin: float = 0.005
) -> PointCloud:
    """Scan points near any nominal face of the joint (scan already in the
    model frame).

    When the scan carries normals, points must also face the same way as the
    cut (within 45 degrees), which keeps adjacent beam-wall points that graze
    the margin out of the segment.
    """
    joint = model.component(joint_id)
    if not isinstance(joint, CutJoint):
        raise EvaluateError(f"'{joint_id}' is not a cut joint")
    cos_limit = math.cos(math.radians(45.0))
    mask = np.zeros(len(scan), dtype=bool)
    for face in joint.faces:
        near = _face_mask(scan.points, face, margin, margin)
        if scan.normals is not None:
            near &= scan.normals @ face.plane.normal >= cos_limit
        mask |= near
    if not np.any(mask):
        raise EmptySegment(f"no scan points near joint '{joint_id}'")
    if scan.normals is not None:
        return PointCloud(scan.points[mask], scan.normals[mask])
    return PointCloud(scan.points[mask])


def joint_location_error(
    segment: PointCloud, model: ExecutionModel, joint_id: str
) -> tuple[float, Pose]:
    """Millimeter norm of the local translation aligning the joint segment
    back onto its nominal face planes.

    Each point is matched to its nearest face plane and a single least
    squares translation is solved; directions the face normals do not span
    stay at zero (point-to-point matching would wander there because two
    samplings of the same plane have an in-plane residual floor).
    """
    joint = model.component(joint_id)
    if not isinstance(joint, CutJoint):
        raise EvaluateError(f"'{joint_id}' is not a cut joint")
    if len(segment) < 3:
        raise EmptySegment(f"joint '{joint_id}': segment too small for a fit")
    planes = [f.plane for f in joint.faces]
    total = np.zeros(3)
    for _ in range(10):
        pts = segment.points + total
        dists = np.stack([p.signed_distance(pts) for p in planes])
        pick = np.argmin(np.abs(dists), axis=0)
        normals = np.stack([planes[k].normal for k in pick])
        residuals = dists[pick, np.arange(len(pick))]
        delta, *_ = np.linalg.lstsq(normals, -residuals, rcond=None)
        total += delta
        if float(np.linalg.norm(delta)) < 1e-12:
            break
    return MM * float(np.linalg.norm(total)), Pose(
        np.array([1.0, 0.0, 0.0, 0.0]), total
    )


def joint_face_error(
    segment: PointCloud,
    face: PlanarFace,
    correction: Pose | None = None,
    max_dist: float = 0.005,
    inset: float = 0.003,
) -> float:
    """Mean absolute plane distance (mm) of the face-associated points."""
    pts = segment.points if correction is None else correction.apply(segment.points)
    mask = _face_mask(pts, face, max_dist, -inset)
    if not np.any(mask):
        raise EmptySegment(f"no points associated with face '{face.face_id}'")
    return MM * float(np.mean(np.abs(face.plane.signed_distance(pts[mask]))))


def segment_dowel(
    scan: PointCloud,
    hole: Hole,
    clearance: float = 0.002,
    protrusion: float = 0.05,
) -> PointCloud:
    """Scan points within clearance of the nominal dowel cylinder.

    With normals available, points whose normal leans along the hole axis
    are dropped: those are beam-surface points ringing the opening, not the
    dowel's lateral surface (whose normals are radial).
    """
    axis = hole.axis
    rel = scan.points - hole.start
    t = rel @ axis
    radial = np.linalg.norm(rel - np.outer(t, axis), axis=1)
    mask = (
        (radial <= hole.radius + clearance)
        & (t >= -protrusion)
        & (t <= hole.depth + clearance)
    )
    if scan.normals is not None:
        mask &= np.abs(scan.normals @ axis) <= 0.45
    if not np.any(mask):
        raise EmptySegment(f"no scan points near dowel '{hole.hole_id}'")
    if scan.normals is not None:
        return PointCloud(scan.points[mask], scan.normals[mask])
    return PointCloud(scan.points[mask])


@dataclass(frozen=True)
class PerforationReport:
    hole_id: str
    orientation_error: float
    start_error: float
    nominal_angle: float


@dataclass(frozen=True)
class JointErrorReport:
    joint_id: str
    location_error: float
    face_errors: dict[str, float]
    face_angles: dict[str, float]
    beam_length: float


def perforation_errors(segment: PointCloud, hole: Hole) -> PerforationReport:
    """Dowel line fit versus the nominal hole axis.

    The fit is total least squares: centroid plus dominant covariance
    eigenvector, which is exactly the orthogonal-regression line.
    """
    pts = segment.points
    if pts.shape[0] < 30:
        raise DegenerateFit(f"dowel '{hole.hole_id}': needs >= 30 points")
    centroid = pts.mean(axis=0)
    cov = np.cov((pts - centroid).T)
    evals, evecs = np.linalg.eigh(cov)
    if evals[2] < 2.0 * evals[1]:
        raise DegenerateFit(f"dowel '{hole.hole_id}': cloud is isotropic")
    axis = evecs[:, 2]
    orientation = angle_between(axis, hole.axis)
    orientation = min(orientation, 180.0 - orientation)
    rel = hole.start - centroid
    start_error = MM * float(np.linalg.norm(rel - (rel @ axis) * axis))
    return PerforationReport(
        hole.hole_id, orientation, start_error, sawing_angle_deg(hole.axis)
    )


def sawing_angle_deg(direction: np.ndarray) -> float:
    """Angle between a direction and the beam long axis (+x), in [0, 90]."""
    a = angle_between(direction, np.array([1.0, 0.0, 0.0]))
    return min(a, 180.0 - a)


def _nearest_bin(value: float, bins: tuple[float, ...]) -> float:
    arr = np.asarray(bins)
    return float(arr[int(np.argmin(np.abs(arr - value)))])


@dataclass(frozen=True)
class StatsRow:
    metric: str
    group: float
    count: int
    mean: float
    std: float
    values: tuple[float, ...] = field(default=())


@dataclass(frozen=True)
class StatsTable:
    rows: tuple[StatsRow, ...]


def _stats(metric: str, groups: dict[float, list[float]], bins) -> list[StatsRow]:
    rows = []
    for b in bins:
        vals = groups.get(b, [])
        n = len(vals)
        if n == 0:
            mean = std = float("nan")
        elif n == 1:
            mean, std = float(vals[0]), float("nan")
        else:
            mean = float(np.mean(vals))
            std = float(np.std(vals, ddof=1))
        rows.append(StatsRow(metric, b, n, mean, std, tuple(vals)))
    return rows


def summarize(
    joint_reports: list[JointErrorReport],
    perforation_reports: list[PerforationReport],
) -> StatsTable:
    """Per-group mean and sample std, Table-style: joint location by beam
    length, face error by sawing angle, perforation metrics by hole angle."""
    loc: dict[float, list[float]] = {}
    for r in joint_reports:
        loc.setdefault(_nearest_bin(r.beam_length, LENGTH_BINS), []).append(
            r.location_error
        )
    faces: dict[float, list[float]] = {}
    for r in joint_reports:
        for fid, err in r.face_errors.items():
            faces.setdefault(
                _nearest_bin(r.face_angles[fid], ANGLE_BINS), []
            ).append(err)
    ori: dict[float, list[float]] = {}
    start: dict[float, list[float]] = {}
    for p in perforation_reports:
        key = _nearest_bin(p.nominal_angle, ANGLE_BINS)
        ori.setdefault(key, []).append(p.orientation_error)
        start.setdefault(key, []).append(p.start_error)

    rows = (
        _stats("joint_location_mm", loc, LENGTH_BINS)
        + _stats("face_error_mm", faces, ANGLE_BINS)
        + _stats("perforation_orientation_deg", ori, ANGLE_BINS)
        + _stats("perforation_start_mm", start, ANGLE_BINS)
    )
    return StatsTable(tuple(rows))


def _num(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def stats_csv(table: StatsTable) -> str:
    lines = ["metric,group,N,mean,std"]
    for r in table.rows:
        lines.append(f"{r.metric},{r.group:g},{r.count},{_num(r.mean)},{_num(r.std)}")
    return "\n".join(lines) + "\n"


def boxplot_csv(table: StatsTable) -> str:
    """Quartiles and 1.5*IQR whiskers per populated group; outliers appended
    semicolon-separated in the last field."""
    lines = ["metric,group,q1,median,q3,whisker_lo,whisker_hi,outliers"]
    for r in table.rows:
        if r.count == 0:
            continue
        vals = np.asarray(r.values)
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        iqr = q3 - q1
        lo_limit, hi_limit = q1 - 1.5 * iqr, q3 + 1.5 * iqr
        inliers = vals[(vals >= lo_limit) & (vals <= hi_limit)]
        lo = float(inliers.min()) if len(inliers) else float(vals.min())
        hi = float(inliers.max()) if len(inliers) else float(vals.max())
        outliers = sorted(float(v) for v in vals[(vals < lo_limit) | (vals > hi_limit)])
        tail = ";".join(f"{v:.6f}" for v in outliers)
        lines.append(
            f"{r.metric},{r.group:g},{_num(float(q1))},{_num(float(med))},"
            f"{_num(float(q3))},{_num(lo)},{_num(hi)},{tail}"
        )
    return "\n".join(lines) + "\n"
