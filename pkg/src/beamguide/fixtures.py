"""Shared demo fixtures: a beam model with joints and a small tool library.

Coordinates are micrometer-exact where serialization round-trips matter.
The demo beam is 2.0 x 0.14 x 0.14 m, centered at the design-frame origin,
with a half-lap at the +x end, a tapered end cut at the -x end, one through
hole, and one angled blind hole.
"""

from __future__ import annotations

import numpy as np

from .acim import BeamSolid, CutJoint, ExecutionModel, Hole, PlanarFace
from .camera import CameraIntrinsics
from .geometry import Pose, quat_from_matrix, quat_from_rotvec
from .mapping import TAG_SIDE
from .simulate import CameraPath, NoiseModel, ScenarioSpec, StripeLayout, ToolScript
from .toolheads import (
    ChainsawPois,
    CircularSawPois,
    DrillPois,
    ToolheadModel,
    ToolKind,
)

__all__ = [
    "demo_model",
    "demo_toolheads",
    "demo_drill",
    "demo_saw",
    "demo_chainsaw",
    "demo_intrinsics",
    "aim_at",
    "closure_model",
    "closure_scenario",
    "short_model",
    "sweep_scenario",
    "sparse_scenario",
]


def demo_model() -> ExecutionModel:
    solid = BeamSolid(2.0, 0.14, 0.14)
    lap_seat = PlanarFace(
        "lap1_seat",
        np.array(
            [
                [0.86, -0.07, 0.0],
                [1.00, -0.07, 0.0],
                [1.00, 0.07, 0.0],
                [0.86, 0.07, 0.0],
            ]
        ),
        np.array([0.0, 0.0, 1.0]),
    )
    lap_shoulder = PlanarFace(
        "lap1_shoulder",
        np.array(
            [
                [0.86, -0.07, 0.0],
                [0.86, 0.07, 0.0],
                [0.86, 0.07, 0.07],
                [0.86, -0.07, 0.07],
            ]
        ),
        np.array([1.0, 0.0, 0.0]),
    )
    # End cut tilted by atan(1/4) about y so every vertex is micrometer-exact:
    # plane x = -0.9 + 0.25 z, waste toward -x.
    scarf = PlanarFace(
        "scarf1_face",
        np.array(
            [
                [-0.9175, -0.07, -0.07],
                [-0.9175, 0.07, -0.07],
                [-0.8825, 0.07, 0.07],
                [-0.8825, -0.07, 0.07],
            ]
        ),
        np.array([-4.0, 0.0, 1.0]) / np.sqrt(17.0),
    )
    holes = [
        Hole(
            "peg1",
            np.array([0.5, 0.0, 0.07]),
            np.array([0.5, 0.0, -0.07]),
            0.006,
            through=True,
        ),
        Hole(
            "peg2",
            np.array([-0.3, 0.0, 0.07]),
            np.array([-0.243431, 0.0, 0.013431]),
            0.008,
            through=False,
        ),
    ]
    return ExecutionModel(
        "demo-beam",
        solid,
        cuts=[
            CutJoint("lap1", [lap_seat, lap_shoulder]),
            CutJoint("scarf1", [scarf]),
        ],
        holes=holes,
    )


def _ring(radius: float, z: float, count: int = 8) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(count) / count
    return np.column_stack(
        [radius * np.cos(ang), radius * np.sin(ang), np.full(count, z)]
    )


def demo_drill() -> ToolheadModel:
    pois = DrillPois(
        base=np.zeros(3),
        chuck=np.array([0.0, 0.0, 0.04]),
        eating_start=np.array([0.0, 0.0, 0.14]),
        tooltip=np.array([0.0, 0.0, 0.15]),
    )
    samples = np.vstack(
        [
            _ring(0.025, 0.01),
            [[0.02, 0.0, 0.08], [-0.02, 0.0, 0.08], [0.0, 0.02, 0.12], [0.0, -0.02, 0.12]],
        ]
    )
    return ToolheadModel("auger-16", ToolKind.DRILL, pois, samples, nominal_diameter=0.016)


def demo_saw() -> ToolheadModel:
    pois = CircularSawPois(
        center=np.array([0.0, 0.0, 0.06]),
        normal_dir=np.array([0.0, 0.0, 1.0]),
        radial_point=np.array([0.0825, 0.0, 0.06]),
    )
    samples = np.vstack(
        [
            _ring(0.05, 0.02),
            [[0.03, 0.0, 0.0], [-0.03, 0.0, 0.0], [0.0, 0.03, 0.04], [0.0, -0.03, 0.04]],
        ]
    )
    return ToolheadModel("sickle-165", ToolKind.CIRCULAR_SAW, pois, samples, kerf=0.0025)


def demo_chainsaw() -> ToolheadModel:
    # Bar in the x=0 plane: chain_start at the root of the bottom edge,
    # chain_mid at the belly of the cutting edge, chain_end at the nose tip.
    pois = ChainsawPois(
        base=np.zeros(3),
        normal_dir=np.array([1.0, 0.0, 0.0]),
        chain_start=np.array([0.0, -0.02, 0.05]),
        chain_mid=np.array([0.0, -0.025, 0.22]),
        chain_end=np.array([0.0, 0.0, 0.40]),
    )
    samples = np.vstack(
        [
            _ring(0.03, 0.01),
            [[0.015, 0.0, 0.03], [-0.015, 0.0, 0.03], [0.0, 0.04, 0.02], [0.0, -0.04, 0.02]],
        ]
    )
    return ToolheadModel("chain-350", ToolKind.CHAINSAW, pois, samples, kerf=0.008)


def demo_toolheads() -> list[ToolheadModel]:
    return [demo_drill(), demo_saw(), demo_chainsaw()]


def demo_intrinsics() -> CameraIntrinsics:
    """720p pinhole used by every demo scenario."""
    return CameraIntrinsics(fx=900.0, fy=900.0, cx=640.0, cy=360.0, width=1280, height=720)


def aim_at(eye, target, up_hint=(1.0, 0.0, 0.0)) -> Pose:
    """Camera placement at eye with the optical axis through target.

    The camera x axis follows up_hint (projected off the view direction), so
    sweeps along the beam keep the image orientation steady.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    nz = np.linalg.norm(z)
    if nz < 1e-9:
        raise ValueError("aim_at needs distinct eye and target")
    z = z / nz
    x = np.asarray(up_hint, dtype=float)
    x = x - (x @ z) * z
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        x = np.array([0.0, 1.0, 0.0])
        x = x - (x @ z) * z
        nx = np.linalg.norm(x)
    x = x / nx
    rot = np.column_stack([x, np.cross(z, x), z])
    return Pose(quat_from_matrix(rot), eye)


def _orbit(theta_deg: float, x: float, radius: float = 0.45) -> Pose:
    """Placement on a circle around the beam axis, looking at the axis."""
    th = np.deg2rad(theta_deg)
    eye = np.array([x, radius * np.sin(th), radius * np.cos(th)])
    return aim_at(eye, np.array([x, 0.0, 0.0]))


def closure_model() -> ExecutionModel:
    """One-meter beam with a half-lap at the +x end and a vertical peg hole.

    Sized so a four-stripe tag layout (21 tags at 49 mm pitch) spans the
    length exactly, which makes the tag-box registration exact as well.
    """
    solid = BeamSolid(1.0, 0.14, 0.14)
    seat = PlanarFace(
        "lap1_seat",
        np.array(
            [
                [0.36, -0.07, 0.0],
                [0.50, -0.07, 0.0],
                [0.50, 0.07, 0.0],
                [0.36, 0.07, 0.0],
            ]
        ),
        np.array([0.0, 0.0, 1.0]),
    )
    shoulder = PlanarFace(
        "lap1_shoulder",
        np.array(
            [
                [0.36, -0.07, 0.0],
                [0.36, 0.07, 0.0],
                [0.36, 0.07, 0.07],
                [0.36, -0.07, 0.07],
            ]
        ),
        np.array([1.0, 0.0, 0.0]),
    )
    hole = Hole(
        "peg1",
        np.array([0.0, 0.0, 0.07]),
        np.array([0.0, 0.0, -0.07]),
        0.008,
        through=True,
    )
    return ExecutionModel(
        "closure-beam",
        solid,
        cuts=[CutJoint("lap1", [seat, shoulder])],
        holes=[hole],
    )


def closure_scenario(noise: NoiseModel | None = None, seed: int = 0) -> ScenarioSpec:
    """Full guided run on the closure beam: an orbit-and-sweep mapping tour,
    then three static tool windows (drill plunge, seat cut, shoulder cut).

    Tool keyframes are exact: at each done frame the feedback errors are zero
    and replay reproduces the nominal faces and hole.
    """
    saw = demo_saw()
    kerf = saw.kerf
    drill_tip_len = 0.15

    drill_view = aim_at((0.0, 0.0, 0.62), (0.0, 0.0, 0.07))
    seat_view = aim_at((0.4175, 0.0, 0.62), (0.4175, 0.0, 0.0))
    shoulder_view = aim_at((0.86, 0.0, 0.45), (0.36, 0.0, 0.04))

    keyframes = [
        _orbit(0, -0.35),
        _orbit(0, 0.35),
        _orbit(30, 0.35),
        _orbit(60, 0.35),
        _orbit(90, 0.35),
        _orbit(90, -0.35),
        _orbit(120, -0.35),
        _orbit(150, -0.35),
        _orbit(180, -0.35),
        _orbit(180, 0.35),
        _orbit(210, 0.35),
        _orbit(240, 0.35),
        _orbit(270, 0.35),
        _orbit(270, -0.35),
        _orbit(300, -0.35),
        _orbit(330, -0.35),
        _orbit(360, -0.35),
        drill_view,
        drill_view,
        seat_view,
        seat_view,
        shoulder_view,
        shoulder_view,
    ]

    flip = np.array([0.0, 1.0, 0.0, 0.0])
    drill_start = Pose(flip, np.array([0.0, 0.0, 0.07 + drill_tip_len]))
    drill_done = Pose(flip, np.array([0.0, 0.0, -0.07 + drill_tip_len]))
    # Blade plane rides kerf/2 into the waste; the x position parks the
    # lowest point of the blade exactly on the far edge of the seat.
    seat_saw = Pose(
        np.array([1.0, 0.0, 0.0, 0.0]),
        np.array([0.5 - 0.0825, 0.0, kerf / 2.0 - 0.06]),
    )
    shoulder_saw = Pose(
        quat_from_rotvec(np.array([0.0, np.pi / 2.0, 0.0])),
        np.array([0.36 + kerf / 2.0 - 0.06, 0.0, 0.0825]),
    )

    drill = demo_drill()
    return ScenarioSpec(
        "closure",
        (1.0, 0.14, 0.14),
        StripeLayout(21, 0.049, ("top", "bottom", "left", "right")),
        CameraPath(keyframes, 89),
        tools=(
            ToolScript(drill.tool_id, "peg1", [drill_start, drill_done], 69, 72),
            ToolScript(saw.tool_id, "lap1_seat", [seat_saw], 77, 80),
            ToolScript(saw.tool_id, "lap1_shoulder", [shoulder_saw], 85, 88),
        ),
        noise=noise if noise is not None else NoiseModel(),
        seed=seed,
    )


def short_model() -> ExecutionModel:
    """Half-meter beam with one half-lap; short enough that the end faces
    survive trimmed ICP and pin the axial direction."""
    solid = BeamSolid(0.5, 0.14, 0.14)
    seat = PlanarFace(
        "lap1_seat",
        np.array(
            [
                [0.18, -0.07, 0.0],
                [0.25, -0.07, 0.0],
                [0.25, 0.07, 0.0],
                [0.18, 0.07, 0.0],
            ]
        ),
        np.array([0.0, 0.0, 1.0]),
    )
    shoulder = PlanarFace(
        "lap1_shoulder",
        np.array(
            [
                [0.18, -0.07, 0.0],
                [0.18, 0.07, 0.0],
                [0.18, 0.07, 0.07],
                [0.18, -0.07, 0.07],
            ]
        ),
        np.array([1.0, 0.0, 0.0]),
    )
    return ExecutionModel(
        "short-beam", solid, cuts=[CutJoint("lap1", [seat, shoulder])]
    )


def sweep_scenario(
    length: float = 1.0,
    pitch: float = 0.05,
    sigma_px: float = 0.5,
    seed: int = 0,
    tags: int | None = None,
) -> ScenarioSpec:
    """Single top stripe plus a straight camera sweep in 50 mm steps.

    Used for chain-drift studies: the mapped position of the far-end tag
    degrades with beam length at fixed image noise.
    """
    if tags is None:
        tags = int((length - TAG_SIDE) / pitch) + 1
    margin = 0.25
    lo = -(length / 2.0 - margin)
    hi = length / 2.0 - margin
    frames = int(round((hi - lo) / 0.05)) + 1
    path = CameraPath(
        [aim_at((lo, 0.0, 0.45), (lo, 0.0, 0.07)), aim_at((hi, 0.0, 0.45), (hi, 0.0, 0.07))],
        frames,
    )
    return ScenarioSpec(
        f"sweep-{length:g}",
        (length, 0.14, 0.14),
        StripeLayout(tags, pitch, ("top",)),
        path,
        noise=NoiseModel(corner_sigma_px=sigma_px),
        seed=seed,
    )


def sparse_scenario(sigma_px: float = 0.5, seed: int = 0, trials: int = 100) -> ScenarioSpec:
    """Six tags split over two faces, seen from about 0.8 m by a static
    camera; each frame is one independent localization trial.

    Using two orthogonal faces matters: a single row of tags is nearly
    collinear, which leaves rotation about the row axis poorly constrained.
    """
    path = CameraPath([aim_at((0.0, 0.6, 0.6), (0.0, 0.035, 0.035))], trials)
    return ScenarioSpec(
        "sparse",
        (1.0, 0.14, 0.14),
        StripeLayout(3, 0.31, ("top", "left")),
        path,
        noise=NoiseModel(corner_sigma_px=sigma_px),
        seed=seed,
    )
