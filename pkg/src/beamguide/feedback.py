"""Per-frame guidance errors for cuts and holes.

All inputs are timber-frame geometry: tool geometry from derived_geometry,
faces and holes through the locked registration.  Linear errors are reported
in millimeters, angular ones in degrees.  Face normals point into the waste,
so the kerf-compensated target plane sits kerf/2 along the normal and a
positive position error means the blade is too far into the waste.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .acim import (
    CutJoint,
    ExecutionModel,
    Hole,
    NotRegistered,
    PlanarFace,
    State,
    face_in_timber,
    hole_in_timber,
)
from .geometry import FramedPose, Plane, angle_between
from .mapping import LocalizationFailure
from .toolheads import (
    ChainsawGeometry,
    CircularSawGeometry,
    ToolheadModel,
    ToolheadPose,
    ToolKind,
    derived_geometry,
)

__all__ = [
    "FeedbackError",
    "KindMismatch",
    "NoSelectableFace",
    "DegenerateFace",
    "ToleranceProfile",
    "CutFeedback",
    "ChainsawFeedback",
    "DrillFeedback",
    "FeedbackFrame",
    "nearest_face",
    "cut_feedback",
    "chainsaw_feedback",
    "drill_feedback",
    "make_frame",
]

MM = 1000.0


class FeedbackError(Exception):
    """Base class for guidance failures."""


class KindMismatch(FeedbackError):
    """Raised when the mounted tool cannot fabricate the selected component."""


class NoSelectableFace(FeedbackError):
    """Raised when every face of the selected joint is already done."""


class DegenerateFace(FeedbackError):
    """Raised when the blade-face configuration leaves a direction undefined."""


@dataclass(frozen=True)
class ToleranceProfile:
    """Green thresholds; linear fields in mm, angular in degrees."""

    cut_position: float = 1.0
    cut_orientation: float = 0.5
    cut_depth: float = 1.0
    drill_angle: float = 1.0
    drill_start: float = 2.0
    drill_depth: float = 1.0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) <= 0:
                raise ValueError(f"tolerance {name} must be positive")


@dataclass(frozen=True)
class CutFeedback:
    face_id: str
    position_error: float
    orientation_error: float
    depth_error: float
    within: dict[str, bool]
    all_green: bool

    def __post_init__(self):
        if self.all_green != all(self.within.values()):
            raise ValueError("all_green must equal the conjunction of within")


@dataclass(frozen=True)
class ChainsawFeedback:
    face_id: str
    far_point_error: float
    bottom_point_error: float
    orientation_error: float
    within: dict[str, bool]
    all_green: bool

    def __post_init__(self):
        if self.all_green != all(self.within.values()):
            raise ValueError("all_green must equal the conjunction of within")


@dataclass(frozen=True)
class DrillFeedback:
    hole_id: str
    angle_error: float
    start_error: float
    depth_remaining: float
    within: dict[str, bool]
    all_green: bool

    def __post_init__(self):
        if self.all_green != all(self.within.values()):
            raise ValueError("all_green must equal the conjunction of within")


@dataclass(frozen=True)
class FeedbackFrame:
    """One guidance update; payload is None whenever localization failed."""

    timestamp: float
    status: str
    payload: CutFeedback | ChainsawFeedback | DrillFeedback | None


def _fold(angle_deg: float) -> float:
    """Fold an angle between unoriented directions into [0, 90]."""
    return min(angle_deg, 180.0 - angle_deg)


def _blade_reference(geo) -> np.ndarray:
    if isinstance(geo, CircularSawGeometry):
        return geo.center
    if isinstance(geo, ChainsawGeometry):
        return geo.chain_mid
    raise KindMismatch("face selection needs a saw geometry")


def nearest_face(geo, joint: CutJoint) -> str:
    """Id of the closest not-yet-done face to the blade reference point."""
    ref = _blade_reference(geo)
    best = None
    for face in joint.faces:
        if face.state is State.DONE:
            continue
        d = float(np.linalg.norm(face.centroid - ref))
        if best is None or (d, face.face_id) < best[:2]:
            best = (d, face.face_id)
    if best is None:
        raise NoSelectableFace(f"every face of {joint.joint_id} is done")
    return best[1]


def _target_plane(face: PlanarFace, kerf: float) -> Plane:
    p = face.plane
    return Plane(p.normal, p.offset + kerf / 2.0)


def cut_feedback(
    geo: CircularSawGeometry, face: PlanarFace, tol: ToleranceProfile
) -> CutFeedback:
    target = _target_plane(face, geo.kerf)
    position = MM * float(target.signed_distance(geo.center))
    orientation = _fold(angle_between(geo.normal, face.normal))

    # Depth is measured against the face's bottom edge: the edge farthest
    # from the blade along the in-plane approach direction.
    n = face.normal
    w = geo.center - face.centroid
    approach = w - (w @ n) * n
    na = float(np.linalg.norm(approach))
    if na < 1e-9:
        raise DegenerateFace(f"{face.face_id}: approach direction undefined")
    approach /= na

    poly = face.polygon
    mids = (poly + np.roll(poly, -1, axis=0)) / 2.0
    k = int(np.argmin(mids @ approach))
    v1 = poly[k]
    v2 = poly[(k + 1) % poly.shape[0]]
    edge = v2 - v1
    edge /= np.linalg.norm(edge)
    down = np.cross(n, edge)
    if float(down @ approach) > 0:
        down = -down

    # Lowest point of the blade circle: the in-blade-plane direction with the
    # largest component along "down".
    b = geo.normal
    in_blade = down - (down @ b) * b
    nb = float(np.linalg.norm(in_blade))
    if nb < 1e-9:
        raise DegenerateFace(f"{face.face_id}: blade plane parallel to the edge plane")
    lowest = geo.center + geo.radius * (in_blade / nb)
    depth = MM * float((lowest - v1) @ down)

    within = {
        "position": abs(position) <= tol.cut_position,
        "orientation": orientation <= tol.cut_orientation,
        "depth": abs(depth) <= tol.cut_depth,
    }
    return CutFeedback(
        face.face_id, position, orientation, depth, within, all(within.values())
    )


def chainsaw_feedback(
    geo: ChainsawGeometry, face: PlanarFace, tol: ToleranceProfile
) -> ChainsawFeedback:
    target = _target_plane(face, geo.kerf)
    far = MM * float(target.signed_distance(geo.chain_end))
    bottom = MM * float(target.signed_distance(geo.chain_mid))
    orientation = _fold(angle_between(geo.normal, face.normal))
    within = {
        "far_point": abs(far) <= tol.cut_position,
        "bottom_point": abs(bottom) <= tol.cut_position,
        "orientation": orientation <= tol.cut_orientation,
    }
    return ChainsawFeedback(
        face.face_id, far, bottom, orientation, within, all(within.values())
    )


def drill_feedback(geo, hole: Hole, tol: ToleranceProfile) -> DrillFeedback:
    axis = hole.axis
    angle = _fold(angle_between(geo.axis, axis))

    offset = geo.tooltip - hole.start
    advance = float(offset @ axis)
    if advance <= 0:
        start = MM * float(np.linalg.norm(offset))
    else:
        start = MM * float(np.linalg.norm(offset - advance * axis))
    depth_remaining = max(MM * (hole.depth - max(0.0, advance)), -10.0)

    within = {
        "angle": angle <= tol.drill_angle,
        "start": start <= tol.drill_start,
        "depth": depth_remaining <= tol.drill_depth,
    }
    return DrillFeedback(
        hole.hole_id, angle, start, depth_remaining, within, all(within.values())
    )


def make_frame(
    localization: FramedPose | LocalizationFailure,
    tool: ToolheadModel,
    tool_pose: ToolheadPose,
    model: ExecutionModel,
    component: CutJoint | Hole,
    tol: ToleranceProfile | None = None,
    timestamp: float | None = None,
) -> FeedbackFrame:
    """Dispatch one guidance frame for the selected component."""
    ts = time.time() if timestamp is None else timestamp
    if isinstance(localization, LocalizationFailure):
        return FeedbackFrame(ts, localization.reason, None)
    tol = ToleranceProfile() if tol is None else tol
    if model.registration is None:
        raise NotRegistered("model must be registered before guidance")
    reg = model.registration
    geo = derived_geometry(tool, tool_pose, localization)

    if tool.kind is ToolKind.DRILL:
        if not isinstance(component, Hole):
            raise KindMismatch("a drill is mounted but the selection is not a hole")
        payload = drill_feedback(geo, hole_in_timber(component, reg), tol)
    else:
        if not isinstance(component, CutJoint):
            raise KindMismatch(
                f"a {tool.kind.value} is mounted but the selection is not a cut"
            )
        faces = [face_in_timber(f, reg) for f in component.faces]
        picked = nearest_face(geo, CutJoint(component.joint_id, faces, component.state))
        face = next(f for f in faces if f.face_id == picked)
        if tool.kind is ToolKind.CIRCULAR_SAW:
            payload = cut_feedback(geo, face, tol)
        else:
            payload = chainsaw_feedback(geo, face, tol)
    return FeedbackFrame(ts, "ok", payload)
