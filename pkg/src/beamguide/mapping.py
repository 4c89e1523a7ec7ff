"""Tag-map construction and camera relocalization.

A tag map expresses every fiducial tag's four corners in the timber frame.
The gauge is fixed by the first observed tag: its center becomes the origin,
its plane the xy-plane, its first edge the +x axis.  Mapping proceeds
incrementally (localize against registered tags, back-project new ones) and
ends with one global bundle refinement over all camera and tag poses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import yaml

from .camera import (
    CameraIntrinsics,
    InsufficientObservations,
    SolverDiverged,
    solve_pose,
)
from .geometry import (
    FrameMismatch,
    FramedPose,
    FrameTag,
    Obb,
    Pose,
    _canonical_axes,
    angle_between,
    obb_fit,
    polygon_normal,
    quat_from_rotvec,
    skew,
)

__all__ = [
    "TAG_ID_LIMIT",
    "TAG_SIDE",
    "INCIDENCE_LIMIT_DEG",
    "MappingError",
    "EmptySequence",
    "BrokenChain",
    "MapFormatError",
    "NotVisible",
    "LocalizationFailure",
    "Tag",
    "TagMap",
    "TagObservation",
    "canonical_corners",
    "project_tag",
    "pnp_pose",
    "build_map",
    "refine_map",
    "localize",
    "dump_tag_map",
    "parse_tag_map",
    "save_tag_map",
    "load_tag_map",
]

TAG_ID_LIMIT = 22309
TAG_SIDE = 0.020
INCIDENCE_LIMIT_DEG = 70.0


class MappingError(Exception):
    """Base class for mapping failures."""


class EmptySequence(MappingError):
    """Raised when a mapping recording starts with no observations."""


class BrokenChain(MappingError):
    """Raised when a frame shares no tag with the registered set."""


class MapFormatError(MappingError):
    """Raised on malformed tag-map files."""


@dataclass(frozen=True)
class NotVisible:
    """Returned by project_tag when a tag cannot be detected from a pose."""

    reason: str


@dataclass(frozen=True)
class LocalizationFailure:
    """Returned by localize so the feedback loop can blank overlays."""

    reason: str


def canonical_corners(side: float = TAG_SIDE) -> np.ndarray:
    """Tag-local corners, CCW in the xy-plane with edge 0->1 along +x."""
    h = side / 2.0
    return np.array(
        [[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]]
    )


@dataclass(frozen=True)
class Tag:
    """One fiducial tag with its corners expressed in the timber frame."""

    tag_id: int
    corners: np.ndarray
    side: float = TAG_SIDE

    def __post_init__(self):
        if not (0 <= self.tag_id < TAG_ID_LIMIT):
            raise ValueError(f"tag id {self.tag_id} outside [0, {TAG_ID_LIMIT})")
        c = np.asarray(self.corners, dtype=float).reshape(4, 3)
        object.__setattr__(self, "corners", c)
        edges = np.linalg.norm(np.roll(c, -1, axis=0) - c, axis=1)
        if np.any(np.abs(edges - self.side) > 1e-6):
            raise ValueError(f"tag {self.tag_id} edges deviate from {self.side} m")
        n = polygon_normal(c)
        center = c.mean(axis=0)
        if np.max(np.abs((c - center) @ n)) > 1e-6:
            raise ValueError(f"tag {self.tag_id} corners are not coplanar")

    @property
    def center(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    @property
    def normal(self) -> np.ndarray:
        return polygon_normal(self.corners)

    @property
    def pose(self) -> Pose:
        """Tag-local to timber placement (origin center, edge 0->1 = +x)."""
        ex = self.corners[1] - self.corners[0]
        ex = ex / np.linalg.norm(ex)
        n = self.normal
        ey = np.cross(n, ex)
        r = np.column_stack((ex, ey, n))
        return Pose.from_rt(r, self.center)


@dataclass
class TagMap:
    """All mapped tags plus the gauge anchor; immutable after build."""

    beam_id: str
    gauge_tag_id: int
    tags: dict[int, Tag] = field(default_factory=dict)

    def __post_init__(self):
        if not self.tags:
            raise MappingError("tag map must contain at least one tag")
        if self.gauge_tag_id not in self.tags:
            raise MappingError("gauge tag missing from map")

    @property
    def tag_ids(self) -> list[int]:
        return sorted(self.tags)

    def all_corners(self) -> np.ndarray:
        return np.vstack([self.tags[i].corners for i in self.tag_ids])

    @cached_property
    def obb(self) -> Obb:
        """Registration box: long axis from corner spread, cross axes from the
        gauge tag's surface normal.

        Stripes centered on four beam faces project to a plus-shaped cross
        section whose minimum-area rectangle sits at 45 degrees, so a blind
        box fit misorients the beam.  Tags lie flat on the faces, so the
        gauge normal is a face normal and pins the cross-section axes.
        """
        corners = self.all_corners()
        centroid = corners.mean(axis=0)
        _, _, vt = np.linalg.svd(corners - centroid)
        a0 = vt[0]
        n = self.tags[self.gauge_tag_id].normal
        u = n - (n @ a0) * a0
        nu = np.linalg.norm(u)
        if nu < 1e-9:
            # Gauge plane perpendicular to the long axis (end-face tag);
            # fall back to the generic fit.
            return obb_fit(corners, min_extent=1e-6)
        u = u / nu
        axes = np.column_stack([a0, u, np.cross(a0, u)])
        local = (corners - centroid) @ axes
        lo, hi = local.min(axis=0), local.max(axis=0)
        center = centroid + axes @ ((lo + hi) / 2.0)
        half = np.maximum((hi - lo) / 2.0, 1e-6)
        order = np.argsort(-half, kind="stable")
        axes = _canonical_axes(axes[:, order])
        local = (corners - center) @ axes
        half = np.maximum(
            (local.max(axis=0) - local.min(axis=0)) / 2.0, 1e-6
        )
        return Obb(center, axes, half)


@dataclass(frozen=True)
class TagObservation:
    """Detected tag corners in pixels, ordered like Tag.corners."""

    tag_id: int
    corners: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "corners", np.asarray(self.corners, dtype=float).reshape(4, 2)
        )


def project_tag(
    intr: CameraIntrinsics,
    cam_pose: FramedPose,
    tag: Tag,
    frame_index: int = 0,
) -> TagObservation | NotVisible:
    """Project a mapped tag into the image, or say why it cannot be seen."""
    if cam_pose.src is not FrameTag.TIMBER or cam_pose.dst is not FrameTag.CAMERA:
        raise FrameMismatch("project_tag expects a timber->camera pose")
    pc = cam_pose.transform_point(tag.corners)
    if np.any(pc[:, 2] <= 0.0):
        return NotVisible("corner behind camera")
    uv = intr.project(pc)
    if not np.all(intr.in_bounds(uv)):
        return NotVisible("corner outside image")
    if not np.all(intr.within_fov(pc)):
        return NotVisible("corner beyond fov limit")
    cam_center = cam_pose.invert().pose.t
    view = cam_center - tag.center
    if np.linalg.norm(view) < 1e-12:
        return NotVisible("camera on tag center")
    if angle_between(tag.normal, view) > INCIDENCE_LIMIT_DEG:
        return NotVisible("incidence beyond limit")
    return TagObservation(tag.tag_id, uv, frame_index)


def _solve_frame(
    observations: list[TagObservation],
    tags: dict[int, Tag],
    intr: CameraIntrinsics,
    init: Pose | None,
) -> tuple[Pose, float]:
    known = [o for o in observations if o.tag_id in tags]
    if 4 * len(known) < 4:
        raise InsufficientObservations("fewer than 4 matched corner correspondences")
    p3 = np.vstack([tags[o.tag_id].corners for o in known])
    p2 = np.vstack([o.corners for o in known])
    return solve_pose(p3, p2, intr, init=init)


def pnp_pose(
    observations: list[TagObservation],
    tag_map: TagMap,
    intr: CameraIntrinsics,
    init: FramedPose | None = None,
) -> tuple[FramedPose, float]:
    """Camera pose (timber->camera) from tag observations plus RMSE in px."""
    init_pose = None
    if init is not None:
        if init.src is not FrameTag.TIMBER or init.dst is not FrameTag.CAMERA:
            raise FrameMismatch("pnp init must be timber->camera")
        init_pose = init.pose
    pose, rmse = _solve_frame(observations, tag_map.tags, intr, init_pose)
    return FramedPose(pose, FrameTag.TIMBER, FrameTag.CAMERA), rmse


def localize(
    observations: list[TagObservation],
    tag_map: TagMap,
    intr: CameraIntrinsics,
    init: FramedPose | None = None,
) -> FramedPose | LocalizationFailure:
    """pnp_pose with failures folded into a value instead of an exception."""
    if not any(o.tag_id in tag_map.tags for o in observations):
        return LocalizationFailure("no observed tag is in the map")
    try:
        pose, _ = pnp_pose(observations, tag_map, intr, init=init)
    except (InsufficientObservations, SolverDiverged) as exc:
        return LocalizationFailure(str(exc))
    return pose


def _tag_from_observation(
    obs: TagObservation, cam_pose: Pose, intr: CameraIntrinsics
) -> Tag:
    """Back-project a newly seen tag through the solved camera pose."""
    local = canonical_corners()
    tag_to_cam, _ = solve_pose(local, obs.corners, intr)
    placement = tag_to_cam.then(cam_pose.inverse())
    return Tag(obs.tag_id, placement.apply(local))


def build_map(
    frames: list[list[TagObservation]],
    intr: CameraIntrinsics,
    beam_id: str = "beam",
    refine: bool = True,
    refine_iters: int = 30,
) -> TagMap:
    """Incremental map build gauged on the first observed tag.

    Each frame must share at least one tag with the registered set, otherwise
    the chain is broken and mapping fails; long sparsely tagged beams are the
    classic way to hit this.
    """
    if not frames or not frames[0]:
        raise EmptySequence("mapping needs a first frame with at least one tag")
    gauge_id = frames[0][0].tag_id
    tags: dict[int, Tag] = {gauge_id: Tag(gauge_id, canonical_corners())}
    cam_poses: list[Pose] = []
    prev: Pose | None = None
    for i, frame in enumerate(frames):
        try:
            cam_pose, _ = _solve_frame(frame, tags, intr, prev)
        except InsufficientObservations as exc:
            raise BrokenChain(f"frame {i} shares no tag with the map") from exc
        cam_poses.append(cam_pose)
        prev = cam_pose
        for obs in frame:
            if obs.tag_id in tags:
                continue
            try:
                tags[obs.tag_id] = _tag_from_observation(obs, cam_pose, intr)
            except SolverDiverged:
                continue  # tag may register cleanly from a later frame
    built = TagMap(beam_id, gauge_id, tags)
    if refine:
        built = refine_map(built, frames, intr, max_iters=refine_iters, cam_init=cam_poses)
    return built


def _placement_params(tag_map: TagMap) -> tuple[list[int], dict[int, Pose]]:
    order = [i for i in tag_map.tag_ids if i != tag_map.gauge_tag_id]
    placements = {i: tag_map.tags[i].pose for i in tag_map.tag_ids}
    return order, placements


def refine_map(
    tag_map: TagMap,
    frames: list[list[TagObservation]],
    intr: CameraIntrinsics,
    max_iters: int = 30,
    cam_init: list[Pose] | None = None,
) -> TagMap:
    """Joint bundle refinement of all camera poses and tag placements.

    The gauge tag stays fixed; total reprojection RMSE never increases
    (steps are only accepted when they lower the cost).
    """
    local = canonical_corners()
    tag_order, placements = _placement_params(tag_map)
    tag_slot = {tid: k for k, tid in enumerate(tag_order)}

    cams: list[Pose] = []
    obs_list: list[tuple[int, int, np.ndarray]] = []
    prev: Pose | None = None
    for i, frame in enumerate(frames):
        known = [o for o in frame if o.tag_id in tag_map.tags]
        if not known:
            continue
        if cam_init is not None and i < len(cam_init):
            cam = cam_init[i]
        else:
            try:
                cam, _ = _solve_frame(known, tag_map.tags, intr, prev)
            except (InsufficientObservations, SolverDiverged):
                continue
        prev = cam
        slot = len(cams)
        cams.append(cam)
        for o in known:
            obs_list.append((slot, o.tag_id, o.corners))
    if not obs_list:
        return tag_map

    n_cams = len(cams)
    n_params = 6 * (n_cams + len(tag_order))

    def residuals(cs: list[Pose], pl: dict[int, Pose]) -> np.ndarray | None:
        out = np.empty(8 * len(obs_list))
        for k, (ci, tid, uv) in enumerate(obs_list):
            pc = cs[ci].apply(pl[tid].apply(local))
            if np.any(pc[:, 2] <= 1e-9):
                return None
            out[8 * k : 8 * k + 8] = (intr.project(pc) - uv).ravel()
        return out

    def jacobian(cs: list[Pose], pl: dict[int, Pose]) -> "object":
        from scipy.sparse import coo_matrix

        rows, cols, vals = [], [], []
        for k, (ci, tid, uv) in enumerate(obs_list):
            rf = cs[ci].rotation
            pt = pl[tid].apply(local)
            pc = pt @ rf.T + cs[ci].t
            for j in range(4):
                x, y, z = pc[j]
                proj = np.array(
                    [
                        [intr.fx / z, 0.0, -intr.fx * x / (z * z)],
                        [0.0, intr.fy / z, -intr.fy * y / (z * z)],
                    ]
                )
                jc = np.hstack((proj @ (-skew(pc[j])), proj))
                r0 = 8 * k + 2 * j
                for a in range(2):
                    for b in range(6):
                        rows.append(r0 + a)
                        cols.append(6 * ci + b)
                        vals.append(jc[a, b])
                if tid in tag_slot:
                    pr = proj @ rf
                    jt = np.hstack((pr @ (-skew(pt[j])), pr))
                    c0 = 6 * (n_cams + tag_slot[tid])
                    for a in range(2):
                        for b in range(6):
                            rows.append(r0 + a)
                            cols.append(c0 + b)
                            vals.append(jt[a, b])
        return coo_matrix(
            (vals, (rows, cols)), shape=(8 * len(obs_list), n_params)
        ).tocsr()

    def apply_step(cs, pl, delta):
        new_cs = []
        for i, cam in enumerate(cs):
            d = delta[6 * i : 6 * i + 6]
            new_cs.append(cam.then(Pose(quat_from_rotvec(d[:3]), d[3:])))
        new_pl = dict(pl)
        for tid, k in tag_slot.items():
            d = delta[6 * (n_cams + k) : 6 * (n_cams + k) + 6]
            new_pl[tid] = pl[tid].then(Pose(quat_from_rotvec(d[:3]), d[3:]))
        return new_cs, new_pl

    r = residuals(cams, placements)
    if r is None:
        raise SolverDiverged("refinement start places corners behind a camera")
    cost = float(r @ r)
    lam = 1e-3
    rejects = 0
    for _ in range(max_iters):
        jac = jacobian(cams, placements)
        jtj = (jac.T @ jac).toarray()
        jtr = jac.T @ r
        if not np.all(np.isfinite(jtj)):
            raise SolverDiverged("non-finite bundle Jacobian")
        if float(np.max(np.abs(jtr))) < 1e-9:
            break  # gradient vanished: already at the cost minimum
        stepped = False
        while rejects < 5:
            damped = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                delta = np.linalg.solve(damped, -jtr)
            except np.linalg.LinAlgError as exc:
                raise SolverDiverged("singular bundle normal equations") from exc
            c_cams, c_pl = apply_step(cams, placements, delta)
            cr = residuals(c_cams, c_pl)
            ccost = float(cr @ cr) if cr is not None else math.inf
            if ccost < cost:
                cams, placements, r, cost = c_cams, c_pl, cr, ccost
                lam = max(lam / 10.0, 1e-7)
                rejects = 0
                stepped = True
                break
            lam *= 10.0
            rejects += 1
        if not stepped or float(np.linalg.norm(delta)) < 1e-10:
            break  # converged or stalled at a cost minimum

    tags = dict(tag_map.tags)
    for tid in tag_order:
        tags[tid] = Tag(tid, placements[tid].apply(local))
    return TagMap(tag_map.beam_id, tag_map.gauge_tag_id, tags)


def dump_tag_map(tag_map: TagMap) -> str:
    """Deterministic text form: sorted ids, 9-decimal meters."""
    lines = [
        "beamguide_tag_map: 1",
        f"beam_id: {tag_map.beam_id}",
        f"gauge_tag_id: {tag_map.gauge_tag_id}",
        f"tag_count: {len(tag_map.tags)}",
        "tags:",
    ]
    for tid in tag_map.tag_ids:
        tag = tag_map.tags[tid]
        lines.append(f"- id: {tid}")
        lines.append("  corners:")
        for c in tag.corners:
            lines.append(f"  - [{c[0]:.9f}, {c[1]:.9f}, {c[2]:.9f}]")
    return "\n".join(lines) + "\n"


def parse_tag_map(text: str) -> TagMap:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise MapFormatError(f"unreadable tag map: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("beamguide_tag_map") != 1:
        raise MapFormatError("missing beamguide_tag_map header")
    try:
        beam_id = str(doc["beam_id"])
        gauge = int(doc["gauge_tag_id"])
        records = doc["tags"]
        tags = {}
        for rec in records:
            tid = int(rec["id"])
            tags[tid] = Tag(tid, np.array(rec["corners"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise MapFormatError(f"bad tag map record: {exc}") from exc
    if doc.get("tag_count") != len(tags):
        raise MapFormatError("tag_count does not match records")
    return TagMap(beam_id, gauge, tags)


def save_tag_map(tag_map: TagMap, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dump_tag_map(tag_map))


def load_tag_map(path) -> TagMap:
    with open(path, "r", encoding="utf-8") as f:
        return parse_tag_map(f.read())
