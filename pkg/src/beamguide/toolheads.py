"""Toolhead library: points of interest, ACIT files, camera-frame refinement.

Each toolhead model carries kind-specific points of interest (PoIs) in its
local frame (origin at base, +z toward the tooltip or blade normal) plus a
set of surface sample points used for pose refinement.  The refined pose is
camera->toolhead and is held fixed while fabricating; tool geometry in the
timber frame comes from chaining it with the camera localization.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .camera import (
    CameraIntrinsics,
    InsufficientObservations,
    solve_pose,
)
from .geometry import (
    FrameMismatch,
    FramedPose,
    FrameTag,
    Plane,
    compose,
)

__all__ = [
    "ToolheadError",
    "AcitParseError",
    "EmptyLibrary",
    "InsufficientCorrespondences",
    "ToolKind",
    "DrillPois",
    "CircularSawPois",
    "ChainsawPois",
    "ToolheadModel",
    "ToolheadPose",
    "DrillGeometry",
    "CircularSawGeometry",
    "ChainsawGeometry",
    "set_initial_pose",
    "refine_pose",
    "derived_geometry",
    "parse_acit",
    "serialize_acit",
    "load_library",
    "save_acit",
]


class ToolheadError(Exception):
    """Base class for toolhead failures."""


class AcitParseError(ToolheadError):
    """Raised on malformed ACIT content; message names file and field."""


class EmptyLibrary(ToolheadError):
    """Raised when a library directory yields no valid models."""


class InsufficientCorrespondences(ToolheadError):
    """Raised when refine_pose is given fewer than 4 correspondences."""


class ToolKind(Enum):
    DRILL = "drill"
    CIRCULAR_SAW = "circular_saw"
    CHAINSAW = "chainsaw"


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(3)


def _unit(v, what: str) -> np.ndarray:
    v = _vec(v)
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise ValueError(f"{what} must be a nonzero vector")
    return v / n


@dataclass(frozen=True)
class DrillPois:
    base: np.ndarray
    chuck: np.ndarray
    eating_start: np.ndarray
    tooltip: np.ndarray

    def __post_init__(self):
        for name in ("base", "chuck", "eating_start", "tooltip"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        if np.linalg.norm(self.tooltip - self.base) < 1e-12:
            raise ValueError("drill tooltip coincides with base")

    @property
    def axis(self) -> np.ndarray:
        return _unit(self.tooltip - self.base, "drill axis")


@dataclass(frozen=True)
class CircularSawPois:
    center: np.ndarray
    normal_dir: np.ndarray
    radial_point: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        object.__setattr__(self, "radial_point", _vec(self.radial_point))
        object.__setattr__(self, "normal_dir", _unit(self.normal_dir, "saw normal"))
        if self.radius < 1e-12:
            raise ValueError("circular saw radius must be positive")

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.radial_point - self.center))


@dataclass(frozen=True)
class ChainsawPois:
    base: np.ndarray
    normal_dir: np.ndarray
    chain_start: np.ndarray
    chain_mid: np.ndarray
    chain_end: np.ndarray

    def __post_init__(self):
        for name in ("base", "chain_start", "chain_mid", "chain_end"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        object.__setattr__(self, "normal_dir", _unit(self.normal_dir, "bar normal"))
        area = np.linalg.norm(
            np.cross(self.chain_mid - self.chain_start, self.chain_end - self.chain_start)
        )
        if area < 1e-9:
            raise ValueError("chain points are collinear; bar plane undefined")


_POI_FIELDS = {
    ToolKind.DRILL: ("base", "chuck", "eating_start", "tooltip"),
    ToolKind.CIRCULAR_SAW: ("center", "normal_dir", "radial_point"),
    ToolKind.CHAINSAW: ("base", "normal_dir", "chain_start", "chain_mid", "chain_end"),
}
_POI_TYPES = {
    ToolKind.DRILL: DrillPois,
    ToolKind.CIRCULAR_SAW: CircularSawPois,
    ToolKind.CHAINSAW: ChainsawPois,
}


@dataclass(frozen=True)
class ToolheadModel:
    tool_id: str
    kind: ToolKind
    pois: DrillPois | CircularSawPois | ChainsawPois
    sample_points: np.ndarray
    kerf: float | None = None
    nominal_diameter: float | None = None

    def __post_init__(self):
        sp = np.asarray(self.sample_points, dtype=float).reshape(-1, 3)
        if sp.shape[0] < 8:
            raise ValueError("toolhead needs at least 8 sample points")
        object.__setattr__(self, "sample_points", sp)
        if not isinstance(self.pois, _POI_TYPES[self.kind]):
            raise ValueError(f"pois type does not match kind {self.kind.value}")
        if self.kind is ToolKind.DRILL:
            if self.nominal_diameter is None or self.nominal_diameter <= 0:
                raise ValueError("drill requires a positive nominal_diameter")
        else:
            if self.kerf is None or self.kerf <= 0:
                raise ValueError(f"{self.kind.value} requires a positive kerf")


@dataclass(frozen=True)
class ToolheadPose:
    """Camera->toolhead pose; rmse is None until refined."""

    pose: FramedPose
    reproj_rmse: float | None
    refined: bool

    def __post_init__(self):
        if self.pose.src is not FrameTag.CAMERA or self.pose.dst is not FrameTag.TOOLHEAD:
            raise FrameMismatch("toolhead pose must be camera->toolhead")
        if self.refined and (
            self.reproj_rmse is None or not math.isfinite(self.reproj_rmse)
        ):
            raise ValueError("refined pose requires a finite rmse")


def set_initial_pose(model: ToolheadModel, user_pose: FramedPose) -> ToolheadPose:
    """Store the operator's manual alignment verbatim, unrefined."""
    return ToolheadPose(user_pose, None, False)


def refine_pose(
    model: ToolheadModel,
    observed: list[tuple[int, np.ndarray]],
    init: ToolheadPose,
    intr: CameraIntrinsics,
) -> ToolheadPose:
    """Least-squares pose from sample-point image correspondences.

    ``observed`` pairs a sample-point index with its pixel location.  The
    solver starts from ``init`` (no linear stage) and never returns a pose
    with higher reprojection RMSE than an already-refined init.
    """
    if len(observed) < 4:
        raise InsufficientCorrespondences(
            f"need at least 4 correspondences, got {len(observed)}"
        )
    idx = []
    for i, _ in observed:
        if not (0 <= i < model.sample_points.shape[0]):
            raise ValueError(f"sample point index {i} out of range")
        idx.append(i)
    p3 = model.sample_points[idx]
    p2 = np.array([uv for _, uv in observed], dtype=float)
    try:
        pose_ec, rmse = solve_pose(p3, p2, intr, init=init.pose.pose.inverse())
    except InsufficientObservations as exc:  # duplicate indices collapse
        raise InsufficientCorrespondences(str(exc)) from exc
    return ToolheadPose(
        FramedPose(pose_ec.inverse(), FrameTag.CAMERA, FrameTag.TOOLHEAD),
        rmse,
        True,
    )


@dataclass(frozen=True)
class DrillGeometry:
    """Drill PoIs expressed in the timber frame."""

    base: np.ndarray
    chuck: np.ndarray
    eating_start: np.ndarray
    tooltip: np.ndarray
    axis: np.ndarray
    nominal_diameter: float


@dataclass(frozen=True)
class CircularSawGeometry:
    center: np.ndarray
    normal: np.ndarray
    radius: float
    kerf: float

    @property
    def plane(self) -> Plane:
        return Plane.from_point_normal(self.center, self.normal)


@dataclass(frozen=True)
class ChainsawGeometry:
    base: np.ndarray
    chain_start: np.ndarray
    chain_mid: np.ndarray
    chain_end: np.ndarray
    normal: np.ndarray
    kerf: float

    @property
    def bar_plane(self) -> Plane:
        return Plane.from_point_normal(self.chain_start, self.normal)


def derived_geometry(
    model: ToolheadModel,
    pose: ToolheadPose,
    cam_in_timber: FramedPose,
):
    """Tool geometry in the timber frame via t->e = (t->c) then (c->e)."""
    if cam_in_timber.src is not FrameTag.TIMBER or cam_in_timber.dst is not FrameTag.CAMERA:
        raise FrameMismatch("cam_in_timber must be timber->camera")
    t_e = compose(cam_in_timber, pose.pose)
    to_timber = t_e.invert()
    p = model.pois
    if model.kind is ToolKind.DRILL:
        base = to_timber.transform_point(p.base)
        tip = to_timber.transform_point(p.tooltip)
        return DrillGeometry(
            base=base,
            chuck=to_timber.transform_point(p.chuck),
            eating_start=to_timber.transform_point(p.eating_start),
            tooltip=tip,
            axis=_unit(tip - base, "drill axis"),
            nominal_diameter=float(model.nominal_diameter),
        )
    if model.kind is ToolKind.CIRCULAR_SAW:
        return CircularSawGeometry(
            center=to_timber.transform_point(p.center),
            normal=to_timber.pose.rotate(p.normal_dir),
            radius=p.radius,
            kerf=float(model.kerf),
        )
    return ChainsawGeometry(
        base=to_timber.transform_point(p.base),
        chain_start=to_timber.transform_point(p.chain_start),
        chain_mid=to_timber.transform_point(p.chain_mid),
        chain_end=to_timber.transform_point(p.chain_end),
        normal=to_timber.pose.rotate(p.normal_dir),
        kerf=float(model.kerf),
    )


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def serialize_acit(model: ToolheadModel) -> str:
    """Deterministic ACIT text (XML, 6-decimal meters)."""
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<acit version="1" id="{model.tool_id}" kind="{model.kind.value}">',
    ]
    for name in _POI_FIELDS[model.kind]:
        v = getattr(model.pois, name)
        lines.append(
            f'  <poi name="{name}" x="{_fmt(v[0])}" y="{_fmt(v[1])}" z="{_fmt(v[2])}"/>'
        )
    if model.kind is ToolKind.DRILL:
        lines.append(f'  <diameter value="{_fmt(model.nominal_diameter)}"/>')
    else:
        lines.append(f'  <kerf value="{_fmt(model.kerf)}"/>')
    lines.append("  <sample_points>")
    for v in model.sample_points:
        lines.append(f'    <p x="{_fmt(v[0])}" y="{_fmt(v[1])}" z="{_fmt(v[2])}"/>')
    lines.append("  </sample_points>")
    lines.append("</acit>")
    return "\n".join(lines) + "\n"


def _attr(el, name: str, context: str) -> str:
    v = el.get(name)
    if v is None:
        raise AcitParseError(f"{context}: missing attribute '{name}'")
    return v


def _xyz(el, context: str) -> np.ndarray:
    try:
        return np.array(
            [float(_attr(el, a, context)) for a in ("x", "y", "z")], dtype=float
        )
    except ValueError as exc:
        raise AcitParseError(f"{context}: non-numeric coordinate") from exc


def parse_acit(text: str) -> ToolheadModel:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise AcitParseError(f"not well-formed XML: {exc}") from exc
    if root.tag != "acit":
        raise AcitParseError("root element must be 'acit'")
    tool_id = _attr(root, "id", "acit")
    kind_str = _attr(root, "kind", "acit")
    try:
        kind = ToolKind(kind_str)
    except ValueError as exc:
        raise AcitParseError(f"unknown kind '{kind_str}'") from exc

    pois_raw: dict[str, np.ndarray] = {}
    for el in root.findall("poi"):
        name = _attr(el, "name", "poi")
        pois_raw[name] = _xyz(el, f"poi '{name}'")
    missing = [f for f in _POI_FIELDS[kind] if f not in pois_raw]
    if missing:
        raise AcitParseError(f"{kind.value} '{tool_id}': missing poi '{missing[0]}'")
    try:
        pois = _POI_TYPES[kind](**{f: pois_raw[f] for f in _POI_FIELDS[kind]})
    except ValueError as exc:
        raise AcitParseError(f"{kind.value} '{tool_id}': {exc}") from exc

    sp_el = root.find("sample_points")
    if sp_el is None:
        raise AcitParseError(f"'{tool_id}': missing sample_points")
    samples = [_xyz(el, "sample point") for el in sp_el.findall("p")]

    kerf = None
    diameter = None
    kerf_el = root.find("kerf")
    if kerf_el is not None:
        kerf = float(_attr(kerf_el, "value", "kerf"))
    dia_el = root.find("diameter")
    if dia_el is not None:
        diameter = float(_attr(dia_el, "value", "diameter"))
    try:
        return ToolheadModel(tool_id, kind, pois, np.array(samples), kerf, diameter)
    except ValueError as exc:
        raise AcitParseError(f"'{tool_id}': {exc}") from exc


def save_acit(model: ToolheadModel, path) -> None:
    Path(path).write_text(serialize_acit(model), encoding="utf-8")


def load_library(directory, errors_out: list | None = None) -> list[ToolheadModel]:
    """Load every .acit file in a directory; bad files are collected, not fatal."""
    d = Path(directory)
    models: list[ToolheadModel] = []
    for path in sorted(d.glob("*.acit")):
        try:
            models.append(parse_acit(path.read_text(encoding="utf-8")))
        except AcitParseError as exc:
            if errors_out is not None:
                errors_out.append((str(path), str(exc)))
    if not models:
        raise EmptyLibrary(f"no valid ACIT files in {d}")
    ids = [m.tool_id for m in models]
    if len(set(ids)) != len(ids):
        raise AcitParseError("duplicate tool ids in library")
    return models
