"""Execution-model (ACIM) parsing, mutation, registration, serialization.

The model lives in its own design frame with the beam solid centered at the
origin: x spans [-L/2, L/2] along the length, y and z span the cross-section.
That design frame is tagged FrameTag.WORLD; registration is a world->timber
framed pose aligning the solid to a tag map's oriented bounding box.

Coordinates serialize at 6 decimal places (micrometers), so fixture files
should use micrometer-exact values to keep round-trips byte-stable.
"""

from __future__ import annotations

import hashlib
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import (
    FramedPose,
    FrameTag,
    GeometryError,
    Plane,
    Pose,
    polygon_normal,
    rotation_angle_deg,
)
from .mapping import TagMap

__all__ = [
    "AcimError",
    "SchemaError",
    "DuplicateId",
    "DimensionMismatch",
    "LockedModel",
    "UnknownId",
    "NotRegistered",
    "StateError",
    "State",
    "BeamSolid",
    "PlanarFace",
    "CutJoint",
    "Hole",
    "ExecutionModel",
    "parse_acim",
    "serialize_acim",
    "acim_hash",
    "register_to_map",
    "cycle_candidate",
    "slide_along_axis",
    "lock",
    "set_state",
    "face_in_timber",
    "hole_in_timber",
]


class AcimError(Exception):
    """Base class for execution-model failures."""


class SchemaError(AcimError):
    """Raised when required elements, attributes, or states are malformed."""


class DuplicateId(AcimError):
    """Raised when component ids collide (one namespace for cuts/faces/holes)."""


class DimensionMismatch(AcimError):
    """Raised when model dimensions differ from the map box beyond 20%."""


class LockedModel(AcimError):
    """Raised on registration edits after lock."""


class UnknownId(AcimError):
    """Raised when a component id does not exist."""


class NotRegistered(AcimError):
    """Raised when an operation needs a registration that is absent."""


class StateError(AcimError):
    """Raised on illegal state assignments (faces cannot be current)."""


class State(Enum):
    PENDING = "pending"
    CURRENT = "current"
    DONE = "done"


@dataclass(frozen=True)
class BeamSolid:
    """Rectangular beam solid centered at the design-frame origin."""

    length: float
    width: float
    height: float

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise GeometryError("beam dimensions must be positive")

    @property
    def half_extents(self) -> np.ndarray:
        return np.array([self.length, self.width, self.height]) / 2.0

    @property
    def dims_sorted(self) -> np.ndarray:
        return np.sort([self.length, self.width, self.height])[::-1]


@dataclass
class PlanarFace:
    """One planar cut face; normal points into the waste volume."""

    face_id: str
    polygon: np.ndarray
    normal: np.ndarray
    state: State = State.PENDING

    def __post_init__(self):
        poly = np.asarray(self.polygon, dtype=float).reshape(-1, 3)
        if poly.shape[0] < 3:
            raise GeometryError(f"face {self.face_id}: needs at least 3 vertices")
        self.polygon = poly
        n = np.asarray(self.normal, dtype=float).reshape(3)
        norm = float(np.linalg.norm(n))
        if norm < 1e-12:
            raise GeometryError(f"face {self.face_id}: zero normal")
        self.normal = n / norm
        pn = polygon_normal(poly)
        if float(np.linalg.norm(np.cross(self.normal, pn))) > 1e-6:
            raise GeometryError(f"face {self.face_id}: normal off the polygon plane")
        centroid = poly.mean(axis=0)
        if np.max(np.abs((poly - centroid) @ self.normal)) > 1e-6:
            raise GeometryError(f"face {self.face_id}: vertices not coplanar")
        if self.state is State.CURRENT:
            raise StateError(f"face {self.face_id}: faces cannot be current")

    @property
    def centroid(self) -> np.ndarray:
        return self.polygon.mean(axis=0)

    @property
    def plane(self) -> Plane:
        offset = float(np.mean(self.polygon @ self.normal))
        return Plane(self.normal, offset)


@dataclass
class CutJoint:
    joint_id: str
    faces: list[PlanarFace]
    state: State = State.PENDING

    def __post_init__(self):
        if not self.faces:
            raise SchemaError(f"cut {self.joint_id}: needs at least one face")


@dataclass
class Hole:
    hole_id: str
    start: np.ndarray
    end: np.ndarray
    radius: float
    through: bool = False
    state: State = State.PENDING

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float).reshape(3)
        self.end = np.asarray(self.end, dtype=float).reshape(3)
        if np.linalg.norm(self.end - self.start) < 1e-12:
            raise GeometryError(f"hole {self.hole_id}: start equals end")
        if self.radius <= 0:
            raise GeometryError(f"hole {self.hole_id}: radius must be positive")

    @property
    def depth(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    @property
    def axis(self) -> np.ndarray:
        return (self.end - self.start) / self.depth


@dataclass
class ExecutionModel:
    beam_id: str
    solid: BeamSolid
    cuts: list[CutJoint] = field(default_factory=list)
    holes: list[Hole] = field(default_factory=list)
    locked: bool = False
    registration: FramedPose | None = None
    reg_candidates: list[FramedPose] = field(default_factory=list)
    reg_axis: np.ndarray | None = None
    reg_index: int = 0
    slide_offset: float = 0.0

    def __post_init__(self):
        ids = [c.joint_id for c in self.cuts] + [h.hole_id for h in self.holes]
        ids += [f.face_id for c in self.cuts for f in c.faces]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise DuplicateId(f"duplicate component id(s): {sorted(dup)}")
        current = [c for c in self.cuts if c.state is State.CURRENT]
        current += [h for h in self.holes if h.state is State.CURRENT]
        if len(current) > 1:
            raise SchemaError("more than one current component")
        if self.locked and self.registration is None:
            raise SchemaError("locked model requires a registration")

    def component(self, component_id: str):
        for cut in self.cuts:
            if cut.joint_id == component_id:
                return cut
            for f in cut.faces:
                if f.face_id == component_id:
                    return f
        for hole in self.holes:
            if hole.hole_id == component_id:
                return hole
        raise UnknownId(f"no component '{component_id}'")

    def face_parent(self, face_id: str) -> CutJoint | None:
        for cut in self.cuts:
            for f in cut.faces:
                if f.face_id == face_id:
                    return cut
        return None

    def current_component(self) -> CutJoint | Hole | None:
        for cut in self.cuts:
            if cut.state is State.CURRENT:
                return cut
        for hole in self.holes:
            if hole.state is State.CURRENT:
                return hole
        return None


def _fmt(x: float) -> str:
    # Avoid the negative-zero spelling so serialization is canonical.
    s = f"{x:.6f}"
    return "0.000000" if s == "-0.000000" else s


def serialize_acim(model: ExecutionModel) -> str:
    """Deterministic ACIM text: sorted ids, 6-decimal meters, UTF-8."""
    s = model.solid
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<acim version="1" beam_id="{model.beam_id}">',
        f'  <beam length="{_fmt(s.length)}" width="{_fmt(s.width)}" height="{_fmt(s.height)}"/>',
    ]
    for cut in sorted(model.cuts, key=lambda c: c.joint_id):
        lines.append(f'  <cut id="{cut.joint_id}" state="{cut.state.value}">')
        for face in sorted(cut.faces, key=lambda f: f.face_id):
            lines.append(f'    <face id="{face.face_id}" state="{face.state.value}">')
            for v in face.polygon:
                lines.append(
                    f'      <v x="{_fmt(v[0])}" y="{_fmt(v[1])}" z="{_fmt(v[2])}"/>'
                )
            # Write the normal recomputed from the vertices (sign from the
            # stored waste-side normal) so round-trips are byte-stable even
            # when a component sits on a rounding boundary.
            n = polygon_normal(face.polygon)
            if float(n @ face.normal) < 0:
                n = -n
            lines.append(
                f'      <n x="{_fmt(n[0])}" y="{_fmt(n[1])}" z="{_fmt(n[2])}"/>'
            )
            lines.append("    </face>")
        lines.append("  </cut>")
    for hole in sorted(model.holes, key=lambda h: h.hole_id):
        lines.append(
            f'  <hole id="{hole.hole_id}" state="{hole.state.value}" '
            f'radius="{_fmt(hole.radius)}" through="{"true" if hole.through else "false"}">'
        )
        lines.append(
            f'    <start x="{_fmt(hole.start[0])}" y="{_fmt(hole.start[1])}" z="{_fmt(hole.start[2])}"/>'
        )
        lines.append(
            f'    <end x="{_fmt(hole.end[0])}" y="{_fmt(hole.end[1])}" z="{_fmt(hole.end[2])}"/>'
        )
        lines.append("  </hole>")
    lines.append("</acim>")
    return "\n".join(lines) + "\n"


def acim_hash(model: ExecutionModel) -> str:
    return hashlib.sha256(serialize_acim(model).encode("utf-8")).hexdigest()


def _req(el, name: str, context: str) -> str:
    v = el.get(name)
    if v is None:
        raise SchemaError(f"{context}: missing attribute '{name}'")
    return v


def _num(el, name: str, context: str) -> float:
    try:
        return float(_req(el, name, context))
    except ValueError as exc:
        raise SchemaError(f"{context}: attribute '{name}' is not a number") from exc


def _xyz(el, context: str) -> np.ndarray:
    return np.array([_num(el, a, context) for a in ("x", "y", "z")])


def _state(el, context: str) -> State:
    raw = _req(el, "state", context)
    try:
        return State(raw)
    except ValueError as exc:
        raise SchemaError(f"{context}: unknown state '{raw}'") from exc


def parse_acim(text: str) -> ExecutionModel:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise SchemaError(f"not well-formed XML: {exc}") from exc
    if root.tag != "acim":
        raise SchemaError("root element must be 'acim'")
    beam_id = _req(root, "beam_id", "acim")
    beam_el = root.find("beam")
    if beam_el is None:
        raise SchemaError("missing beam element")
    solid = BeamSolid(
        _num(beam_el, "length", "beam"),
        _num(beam_el, "width", "beam"),
        _num(beam_el, "height", "beam"),
    )

    cuts = []
    for cut_el in root.findall("cut"):
        cid = _req(cut_el, "id", "cut")
        faces = []
        for face_el in cut_el.findall("face"):
            fid = _req(face_el, "id", f"cut {cid} face")
            verts = [_xyz(v, f"face {fid} vertex") for v in face_el.findall("v")]
            if len(verts) < 3:
                raise SchemaError(f"face {fid}: needs at least 3 vertices")
            n_el = face_el.find("n")
            if n_el is None:
                raise SchemaError(f"face {fid}: missing normal")
            faces.append(
                PlanarFace(
                    fid,
                    np.array(verts),
                    _xyz(n_el, f"face {fid} normal"),
                    _state(face_el, f"face {fid}"),
                )
            )
        cuts.append(CutJoint(cid, faces, _state(cut_el, f"cut {cid}")))

    holes = []
    for hole_el in root.findall("hole"):
        hid = _req(hole_el, "id", "hole")
        start_el = hole_el.find("start")
        end_el = hole_el.find("end")
        if start_el is None or end_el is None:
            raise SchemaError(f"hole {hid}: missing start or end")
        through_raw = _req(hole_el, "through", f"hole {hid}")
        if through_raw not in ("true", "false"):
            raise SchemaError(f"hole {hid}: through must be true or false")
        holes.append(
            Hole(
                hid,
                _xyz(start_el, f"hole {hid} start"),
                _xyz(end_el, f"hole {hid} end"),
                _num(hole_el, "radius", f"hole {hid}"),
                through_raw == "true",
                _state(hole_el, f"hole {hid}"),
            )
        )
    return ExecutionModel(beam_id, solid, cuts, holes)


def _rot_x(k: int) -> np.ndarray:
    c, s = {0: (1, 0), 1: (0, 1), 2: (-1, 0), 3: (0, -1)}[k % 4]
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


_FLIP_Y = np.diag([-1.0, 1.0, -1.0])  # half-turn about the model y axis


def register_to_map(model: ExecutionModel, tag_map: TagMap) -> list[FramedPose]:
    """Candidate model->timber registrations aligning the solid to the map box.

    Eight candidates: four quarter-turns about the long axis times two
    long-axis directions, ordered by rotation angle from identity.  The first
    candidate is applied provisionally; the session cycles through the rest.
    """
    if model.locked:
        raise LockedModel("cannot re-register a locked model")
    obb = tag_map.obb
    dims = model.solid.dims_sorted
    exts = obb.extents
    for d, e in zip(dims, exts):
        if abs(d - e) > 0.20 * d:
            raise DimensionMismatch(
                f"model dims {np.round(dims, 3)} vs map box {np.round(exts, 3)}"
            )

    order = np.argsort(
        -np.array([model.solid.length, model.solid.width, model.solid.height]),
        kind="stable",
    )
    m_axes = np.eye(3)[:, order]
    if np.linalg.det(m_axes) < 0:
        m_axes[:, 2] = -m_axes[:, 2]

    candidates = []
    for flip_idx, flip in enumerate((np.eye(3), _FLIP_Y)):
        for k in range(4):
            r = obb.axes @ flip @ _rot_x(k) @ m_axes.T
            pose = Pose.from_rt(r, obb.center)
            candidates.append((flip_idx, k, pose))
    candidates.sort(
        key=lambda c: (round(rotation_angle_deg(c[2].q), 9), c[0], c[1])
    )
    framed = [
        FramedPose(pose, FrameTag.WORLD, FrameTag.TIMBER) for _, _, pose in candidates
    ]
    model.reg_candidates = framed
    model.reg_axis = obb.axes[:, 0].copy()
    model.reg_index = 0
    model.slide_offset = 0.0
    model.registration = framed[0]
    return framed


def _apply_slide(model: ExecutionModel) -> None:
    base = model.reg_candidates[model.reg_index]
    shift = model.slide_offset * model.reg_axis
    model.registration = FramedPose(
        Pose(base.pose.q, base.pose.t + shift), base.src, base.dst
    )


def cycle_candidate(model: ExecutionModel) -> FramedPose:
    """Advance to the next registration candidate, keeping the slide offset."""
    if model.locked:
        raise LockedModel("cannot cycle candidates on a locked model")
    if not model.reg_candidates:
        raise NotRegistered("register_to_map has not run")
    model.reg_index = (model.reg_index + 1) % len(model.reg_candidates)
    _apply_slide(model)
    return model.registration


def slide_along_axis(model: ExecutionModel, offset: float) -> FramedPose:
    """Translate the registration along the map box long axis by offset (m)."""
    if model.locked:
        raise LockedModel("cannot slide a locked model")
    if model.registration is None or model.reg_axis is None:
        raise NotRegistered("register_to_map has not run")
    model.slide_offset += float(offset)
    _apply_slide(model)
    return model.registration


def lock(model: ExecutionModel) -> None:
    if model.registration is None:
        raise NotRegistered("cannot lock an unregistered model")
    model.locked = True


def set_state(model: ExecutionModel, component_id: str, state: State) -> None:
    """Assign a component state; at most one cut/hole stays current."""
    comp = model.component(component_id)
    if isinstance(comp, PlanarFace):
        if state is State.CURRENT:
            raise StateError(f"face {component_id} cannot be current")
        comp.state = state
        return
    if state is State.CURRENT:
        prev = model.current_component()
        if prev is not None and prev is not comp:
            prev.state = State.PENDING
    comp.state = state


def face_in_timber(face: PlanarFace, registration: FramedPose) -> PlanarFace:
    """The same face expressed in the timber frame via the registration."""
    if registration.src is not FrameTag.WORLD or registration.dst is not FrameTag.TIMBER:
        raise NotRegistered("registration must map the design frame to timber")
    return PlanarFace(
        face.face_id,
        registration.transform_point(face.polygon),
        registration.pose.rotate(face.normal),
        face.state,
    )


def hole_in_timber(hole: Hole, registration: FramedPose) -> Hole:
    if registration.src is not FrameTag.WORLD or registration.dst is not FrameTag.TIMBER:
        raise NotRegistered("registration must map the design frame to timber")
    return Hole(
        hole.hole_id,
        registration.transform_point(hole.start),
        registration.transform_point(hole.end),
        hole.radius,
        hole.through,
        hole.state,
    )
