"""Synthetic scenes: the ground-truth oracle behind every end-to-end test.

A scenario describes a beam, tag stripes on its faces, an interpolated camera
trajectory, scripted tool moves, and a noise model.  Observations are what the
real detector stack would hand the pipeline; ground truth stays on the test
side of the fence.  All randomness flows through seeded PCG64 generators
keyed as [seed, stream, frame] so every artifact is reproducible bit for bit
(streams: 0 tag ids, 1 tag observations, 2 toolhead observations, 3 scans).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .acim import BeamSolid, ExecutionModel
from .camera import CameraIntrinsics
from .evaluate import PointCloud, carve_sample
from .geometry import FramedPose, FrameTag, Pose, quat_slerp
from .mapping import TAG_ID_LIMIT, TAG_SIDE, NotVisible, Tag, TagObservation, canonical_corners, project_tag
from .session import AsBuiltModel
from .toolheads import ToolheadModel

__all__ = [
    "SimulateError",
    "LayoutOverflow",
    "ScenarioFormatError",
    "FACE_NAMES",
    "NoiseModel",
    "StripeLayout",
    "CameraPath",
    "ToolScript",
    "ScenarioSpec",
    "Scene",
    "GroundTruth",
    "make_scene",
    "observe",
    "observe_at",
    "observe_toolhead",
    "observe_toolhead_at",
    "synth_scan",
    "dump_scenario",
    "parse_scenario",
    "save_scenario",
    "load_scenario",
]

FACE_NAMES = ("top", "bottom", "left", "right")


class SimulateError(Exception):
    """Base class for simulator failures."""


class LayoutOverflow(SimulateError):
    """Raised when a tag stripe does not fit on the requested face."""


class ScenarioFormatError(SimulateError):
    """Raised on malformed scenario file content."""


@dataclass(frozen=True)
class NoiseModel:
    corner_sigma_px: float = 0.0
    outlier_rate: float = 0.0
    scan_sigma: float = 0.0

    def __post_init__(self):
        if self.corner_sigma_px < 0 or self.scan_sigma < 0:
            raise SimulateError("noise sigmas must be >= 0")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise SimulateError("outlier rate must be in [0, 1]")


@dataclass(frozen=True)
class StripeLayout:
    """Tag stripes running along the beam length, one run per face."""

    tags_per_stripe: int
    pitch: float
    faces: tuple[str, ...]
    stripes: int = 1

    def __post_init__(self):
        if self.tags_per_stripe < 1 or self.stripes < 1:
            raise SimulateError("stripe layout needs at least one tag")
        if self.pitch < TAG_SIDE:
            raise SimulateError(
                f"pitch {self.pitch:.4f} m is below the tag side {TAG_SIDE} m"
            )
        unknown = [f for f in self.faces if f not in FACE_NAMES]
        if unknown or not self.faces:
            raise SimulateError(f"faces must be a nonempty subset of {FACE_NAMES}")

    @property
    def tags_per_face(self) -> int:
        return self.tags_per_stripe * self.stripes


def _interp_pose(keyframes: list[Pose], s: float) -> Pose:
    """Piecewise interpolation over keyframes, s in [0, 1]."""
    if len(keyframes) == 1:
        return keyframes[0]
    x = s * (len(keyframes) - 1)
    i = min(int(np.floor(x)), len(keyframes) - 2)
    f = x - i
    a, b = keyframes[i], keyframes[i + 1]
    return Pose(quat_slerp(a.q, b.q, f), (1.0 - f) * a.t + f * b.t)


@dataclass(frozen=True)
class CameraPath:
    """Camera placements (camera frame expressed in timber), interpolated."""

    keyframes: list[Pose]
    frame_count: int

    def __post_init__(self):
        if not self.keyframes:
            raise SimulateError("camera path needs at least one keyframe")
        if self.frame_count < 1:
            raise SimulateError("frame_count must be >= 1")

    def placement_at(self, frame_index: int) -> Pose:
        if not 0 <= frame_index < self.frame_count:
            raise SimulateError(
                f"frame {frame_index} outside path of {self.frame_count} frames"
            )
        s = 0.0 if self.frame_count == 1 else frame_index / (self.frame_count - 1)
        return _interp_pose(self.keyframes, s)

    def pose_at(self, frame_index: int) -> FramedPose:
        """Timber->camera pose for projection at the given frame."""
        return FramedPose(
            self.placement_at(frame_index).inverse(), FrameTag.TIMBER, FrameTag.CAMERA
        )


@dataclass(frozen=True)
class ToolScript:
    """Scripted tool placements (tool frame in timber) over a frame window."""

    tool_id: str
    component_id: str
    keyframes: list[Pose]
    start_frame: int
    done_frame: int

    def __post_init__(self):
        if not self.keyframes:
            raise SimulateError("tool script needs at least one keyframe")
        if self.start_frame < 0 or self.done_frame < self.start_frame:
            raise SimulateError("tool script frame window is inverted")

    def active(self, frame_index: int) -> bool:
        return self.start_frame <= frame_index <= self.done_frame

    def placement_at(self, frame_index: int) -> Pose:
        if not self.active(frame_index):
            raise SimulateError(
                f"frame {frame_index} outside tool window "
                f"[{self.start_frame}, {self.done_frame}]"
            )
        span = self.done_frame - self.start_frame
        s = 0.0 if span == 0 else (frame_index - self.start_frame) / span
        return _interp_pose(self.keyframes, s)


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    beam_dims: tuple[float, float, float]
    layout: StripeLayout
    path: CameraPath
    tools: tuple[ToolScript, ...] = ()
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0


@dataclass(frozen=True)
class Scene:
    """What exists in the virtual shop; observations are derived from this."""

    solid: BeamSolid
    tags: list[Tag]
    path: CameraPath
    tools: tuple[ToolScript, ...]
    noise: NoiseModel
    seed: int

    def camera_pose(self, frame_index: int) -> FramedPose:
        return self.path.pose_at(frame_index)

    def tool_script(self, tool_id: str) -> ToolScript:
        for script in self.tools:
            if script.tool_id == tool_id:
                return script
        raise SimulateError(f"no script for tool '{tool_id}'")


@dataclass(frozen=True)
class GroundTruth:
    """Read-only truth for tests; pipeline code must never touch this."""

    tags: list[Tag]
    camera_placements: list[Pose]
    tool_placements: dict[str, list[tuple[int, Pose]]]
    solid: BeamSolid


def _face_frames(width: float, height: float) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Face name -> (center offset, rotation tag-local->timber).

    Tag local axes: x along the beam, z along the outward face normal.
    """
    x = np.array([1.0, 0.0, 0.0])
    frames = {}
    for name, normal, offset in (
        ("top", np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, height / 2])),
        ("bottom", np.array([0.0, 0.0, -1.0]), np.array([0.0, 0.0, -height / 2])),
        ("left", np.array([0.0, 1.0, 0.0]), np.array([0.0, width / 2, 0.0])),
        ("right", np.array([0.0, -1.0, 0.0]), np.array([0.0, -width / 2, 0.0])),
    ):
        rot = np.column_stack((x, np.cross(normal, x), normal))
        frames[name] = (offset, rot)
    return frames


def make_scene(spec: ScenarioSpec) -> tuple[Scene, GroundTruth]:
    """Lay tag stripes on the requested faces and freeze the scene.

    Ids come sequentially from a seeded shuffle of the whole id space, so
    id-keyed lookups are exercised rather than trivially sequential.
    """
    length, width, height = spec.beam_dims
    if min(spec.beam_dims) <= 0:
        raise SimulateError("beam dimensions must be positive")
    solid = BeamSolid(length, width, height)
    per_face = spec.layout.tags_per_face
    span = (per_face - 1) * spec.layout.pitch + TAG_SIDE
    if span > length + 1e-12:
        raise LayoutOverflow(
            f"stripe of {per_face} tags spans {span:.4f} m on a {length:.4f} m beam"
        )
    needed = per_face * len(spec.layout.faces)
    if needed > TAG_ID_LIMIT:
        raise LayoutOverflow(f"layout needs {needed} ids, family has {TAG_ID_LIMIT}")
    rng = np.random.default_rng([spec.seed, 0])
    ids = rng.permutation(TAG_ID_LIMIT)[:needed]

    local = canonical_corners()
    frames = _face_frames(width, height)
    x0 = -(per_face - 1) * spec.layout.pitch / 2.0
    tags: list[Tag] = []
    k = 0
    for face in spec.layout.faces:
        offset, rot = frames[face]
        for i in range(per_face):
            center = offset + np.array([x0 + i * spec.layout.pitch, 0.0, 0.0])
            corners = local @ rot.T + center
            tags.append(Tag(int(ids[k]), corners))
            k += 1

    scene = Scene(solid, tags, spec.path, spec.tools, spec.noise, spec.seed)
    truth = GroundTruth(
        tags=list(tags),
        camera_placements=[
            spec.path.placement_at(f) for f in range(spec.path.frame_count)
        ],
        tool_placements={
            s.tool_id: [
                (f, s.placement_at(f))
                for f in range(spec.path.frame_count)
                if s.active(f)
            ]
            for s in spec.tools
        },
        solid=solid,
    )
    return scene, truth


def observe_at(
    scene: Scene,
    cam_pose: FramedPose,
    frame_index: int,
    intr: CameraIntrinsics,
    noise: NoiseModel | None = None,
) -> list[TagObservation]:
    """Noisy tag detections from an arbitrary camera pose (timber->camera)."""
    noise = scene.noise if noise is None else noise
    rng = np.random.default_rng([scene.seed, 1, frame_index])
    out: list[TagObservation] = []
    for tag in scene.tags:
        seen = project_tag(intr, cam_pose, tag, frame_index)
        if isinstance(seen, NotVisible):
            continue
        corners = seen.corners.copy()
        if noise.corner_sigma_px > 0:
            corners += rng.normal(scale=noise.corner_sigma_px, size=(4, 2))
        if noise.outlier_rate > 0:
            for j in range(4):
                if rng.uniform() < noise.outlier_rate:
                    corners[j] = [
                        rng.uniform(0.0, intr.width),
                        rng.uniform(0.0, intr.height),
                    ]
        if not np.all(intr.in_bounds(corners)):
            continue
        out.append(TagObservation(tag.tag_id, corners, frame_index))
    return out


def observe(
    scene: Scene,
    frame_index: int,
    intr: CameraIntrinsics,
    noise: NoiseModel | None = None,
) -> list[TagObservation]:
    """Noisy tag detections along the scripted camera path."""
    return observe_at(scene, scene.camera_pose(frame_index), frame_index, intr, noise)


def observe_toolhead_at(
    scene: Scene,
    cam_pose: FramedPose,
    tool_placement: Pose,
    model: ToolheadModel,
    frame_index: int,
    intr: CameraIntrinsics,
    noise: NoiseModel | None = None,
) -> list[tuple[int, np.ndarray]]:
    """Detected toolhead marker points as (sample index, pixel) pairs."""
    noise = scene.noise if noise is None else noise
    rng = np.random.default_rng([scene.seed, 2, frame_index])
    in_timber = tool_placement.apply(model.sample_points)
    in_cam = cam_pose.pose.apply(in_timber)
    out: list[tuple[int, np.ndarray]] = []
    for i in range(in_cam.shape[0]):
        p = in_cam[i]
        if p[2] <= 1e-9 or not bool(intr.within_fov(p)[0]):
            continue
        uv = intr.project(p)[0]
        if not bool(intr.in_bounds(uv)[0]):
            continue
        if noise.corner_sigma_px > 0:
            uv = uv + rng.normal(scale=noise.corner_sigma_px, size=2)
        if noise.outlier_rate > 0 and rng.uniform() < noise.outlier_rate:
            uv = np.array([rng.uniform(0.0, intr.width), rng.uniform(0.0, intr.height)])
        if not bool(intr.in_bounds(uv)[0]):
            continue
        out.append((i, uv))
    return out


def observe_toolhead(
    scene: Scene,
    frame_index: int,
    model: ToolheadModel,
    intr: CameraIntrinsics,
    noise: NoiseModel | None = None,
) -> list[tuple[int, np.ndarray]]:
    script = scene.tool_script(model.tool_id)
    if not script.active(frame_index):
        return []
    return observe_toolhead_at(
        scene,
        scene.camera_pose(frame_index),
        script.placement_at(frame_index),
        model,
        frame_index,
        intr,
        noise,
    )


def synth_scan(
    model: ExecutionModel,
    as_built: AsBuiltModel | None,
    density: float,
    sigma: float = 0.0,
    seed: int = 0,
    dowel_density: float | None = None,
) -> PointCloud:
    """Hand-scanner stand-in: carved surface cloud with dowels in executed
    holes and Gaussian noise along the surface normal."""
    built = as_built if as_built is not None else AsBuiltModel()
    rng = np.random.default_rng([seed, 3])
    return carve_sample(
        model,
        density,
        rng,
        cut_planes=built.cut_planes(),
        hole_rays=built.hole_rays(),
        sigma=sigma,
        dowels=True,
        dowel_density=dowel_density,
    )


def _pose_lines(pose: Pose, indent: str) -> list[str]:
    q = ", ".join(f"{v:.9f}" for v in pose.q)
    t = ", ".join(f"{v:.9f}" for v in pose.t)
    return [f"{indent}- q: [{q}]", f"{indent}  t: [{t}]"]


def dump_scenario(spec: ScenarioSpec) -> str:
    """Deterministic text form, same dialect as the tag map file."""
    d = spec.beam_dims
    lines = [
        "beamguide_scenario: 1",
        f"name: {spec.name}",
        f"seed: {spec.seed}",
        f"beam_dims: [{d[0]:.9f}, {d[1]:.9f}, {d[2]:.9f}]",
        "layout:",
        f"  tags_per_stripe: {spec.layout.tags_per_stripe}",
        f"  pitch: {spec.layout.pitch:.9f}",
        f"  stripes: {spec.layout.stripes}",
        f"  faces: [{', '.join(spec.layout.faces)}]",
        "noise:",
        f"  corner_sigma_px: {spec.noise.corner_sigma_px:.9f}",
        f"  outlier_rate: {spec.noise.outlier_rate:.9f}",
        f"  scan_sigma: {spec.noise.scan_sigma:.9f}",
        "camera_path:",
        f"  frame_count: {spec.path.frame_count}",
        "  keyframes:",
    ]
    for kf in spec.path.keyframes:
        lines += _pose_lines(kf, "  ")
    lines.append("tools:")
    for script in spec.tools:
        lines += [
            f"- tool_id: {script.tool_id}",
            f"  component_id: {script.component_id}",
            f"  start_frame: {script.start_frame}",
            f"  done_frame: {script.done_frame}",
            "  keyframes:",
        ]
        for kf in script.keyframes:
            lines += _pose_lines(kf, "  ")
    return "\n".join(lines) + "\n"


def _pose_from_record(rec, context: str) -> Pose:
    try:
        return Pose(np.asarray(rec["q"], dtype=float), np.asarray(rec["t"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioFormatError(f"bad pose in {context}: {exc}") from exc


def parse_scenario(text: str) -> ScenarioSpec:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioFormatError(f"unreadable scenario: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("beamguide_scenario") != 1:
        raise ScenarioFormatError("missing beamguide_scenario header")
    try:
        layout = StripeLayout(
            int(doc["layout"]["tags_per_stripe"]),
            float(doc["layout"]["pitch"]),
            tuple(doc["layout"]["faces"]),
            int(doc["layout"].get("stripes", 1)),
        )
        noise_rec = doc.get("noise", {})
        noise = NoiseModel(
            float(noise_rec.get("corner_sigma_px", 0.0)),
            float(noise_rec.get("outlier_rate", 0.0)),
            float(noise_rec.get("scan_sigma", 0.0)),
        )
        path = CameraPath(
            [
                _pose_from_record(r, "camera_path")
                for r in doc["camera_path"]["keyframes"]
            ],
            int(doc["camera_path"]["frame_count"]),
        )
        tools = tuple(
            ToolScript(
                str(r["tool_id"]),
                str(r["component_id"]),
                [_pose_from_record(k, f"tool {r['tool_id']}") for k in r["keyframes"]],
                int(r["start_frame"]),
                int(r["done_frame"]),
            )
            for r in (doc.get("tools") or [])
        )
        dims = tuple(float(v) for v in doc["beam_dims"])
        if len(dims) != 3:
            raise ScenarioFormatError("beam_dims must have three entries")
        return ScenarioSpec(
            str(doc["name"]), dims, layout, path, tools, noise, int(doc["seed"])
        )
    except SimulateError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioFormatError(f"bad scenario record: {exc}") from exc


def save_scenario(spec: ScenarioSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dump_scenario(spec))


def load_scenario(path) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as f:
        return parse_scenario(f.read())
