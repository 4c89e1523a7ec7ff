"""Command line entry points.

Subcommands cover the batch pipeline end to end: map a scenario's tag
stripes, register a model to the map, run a scripted fabrication session,
replay a session log into an as-built model, score a scan against the
model, and serve a live session over WebSocket.

Exit codes: 0 success, 1 domain error (one-line message on stderr),
2 usage error (argparse).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import yaml

from .acim import (
    AcimError,
    ExecutionModel,
    PlanarFace,
    State,
    acim_hash,
    cycle_candidate,
    lock,
    parse_acim,
    register_to_map,
    serialize_acim,
    set_state,
)
from .camera import CameraError, CameraIntrinsics
from .evaluate import (
    EmptySegment,
    EvaluateError,
    JointErrorReport,
    PointCloud,
    boxplot_csv,
    icp_register,
    joint_face_error,
    joint_location_error,
    load_ply,
    perforation_errors,
    sample_model_cloud,
    save_ply,
    sawing_angle_deg,
    segment_dowel,
    segment_joint,
    stats_csv,
    summarize,
)
from .feedback import FeedbackError, ToleranceProfile, make_frame
from .fixtures import closure_model, demo_intrinsics, demo_toolheads
from .geometry import FramedPose, FrameTag, GeometryError
from .mapping import (
    LocalizationFailure,
    MappingError,
    build_map,
    load_tag_map,
    localize,
    save_tag_map,
)
from .session import (
    EventKind,
    LogWriter,
    SessionError,
    SessionEvent,
    SessionHeader,
    SessionLog,
    feedback_payload,
    import_log,
    pose_payload,
    record,
    replay,
)
from .simulate import (
    ScenarioSpec,
    SimulateError,
    load_scenario,
    make_scene,
    observe,
    observe_toolhead_at,
    synth_scan,
)
from .toolheads import ToolheadError, refine_pose, serialize_acit, set_initial_pose

DOMAIN_ERRORS = (
    AcimError,
    CameraError,
    EvaluateError,
    FeedbackError,
    GeometryError,
    MappingError,
    SessionError,
    SimulateError,
    ToolheadError,
    ValueError,
    OSError,
)


def _load_spec(path: str, seed: int | None) -> ScenarioSpec:
    spec = load_scenario(path)
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    return spec


def _load_tolerances(path: str | None) -> ToleranceProfile:
    if path is None:
        return ToleranceProfile()
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError("tolerance profile must be a mapping of name: value")
    known = {f.name for f in dataclasses.fields(ToleranceProfile)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown tolerance fields: {sorted(unknown)}")
    return dataclasses.replace(ToleranceProfile(), **{k: float(v) for k, v in data.items()})


def mapping_frame_count(spec: ScenarioSpec) -> int:
    """Frames before the first tool window are the mapping pass."""
    return min((s.start_frame for s in spec.tools), default=spec.path.frame_count)


def _scenario_map(spec: ScenarioSpec, intr: CameraIntrinsics):
    scene, truth = make_scene(spec)
    frames = [observe(scene, f, intr) for f in range(mapping_frame_count(spec))]
    tag_map = build_map(frames, intr, beam_id=spec.name)
    return scene, truth, tag_map


def _fmt_vec(v) -> str:
    return "[" + ", ".join(f"{float(x):.9f}" for x in v) + "]"


def cmd_map(args) -> int:
    spec = _load_spec(args.scenario, args.seed)
    intr = demo_intrinsics()
    _, _, tag_map = _scenario_map(spec, intr)
    save_tag_map(tag_map, args.output)
    print(f"map: {len(tag_map.tags)} tags -> {args.output}")
    return 0


def cmd_register(args) -> int:
    tag_map = load_tag_map(args.map)
    model = parse_acim(Path(args.acim).read_text(encoding="utf-8"))
    candidates = register_to_map(model, tag_map)
    print(f"candidates: {len(candidates)}")
    for i, cand in enumerate(candidates):
        print(f"candidate {i}: q {_fmt_vec(cand.pose.q)} t {_fmt_vec(cand.pose.t)}")
    return 0


def _owning_selection(model: ExecutionModel, component_id: str) -> str:
    """A face is worked on through its joint; holes and joints select as is."""
    comp = model.component(component_id)
    if isinstance(comp, PlanarFace):
        for joint in model.cuts:
            if any(f.face_id == component_id for f in joint.faces):
                return joint.joint_id
    return component_id


def simulate_session(
    spec: ScenarioSpec,
    model: ExecutionModel,
    intr: CameraIntrinsics | None = None,
    tol: ToleranceProfile | None = None,
    record_path=None,
) -> SessionLog:
    """Run the scripted session: map, register, then execute each tool window.

    The simulated operator localizes the camera from tag observations and the
    toolhead from marker detections every frame, and picks the registration
    candidate closest to ground truth (the stand-in for a visual check).
    """
    intr = demo_intrinsics() if intr is None else intr
    tol = ToleranceProfile() if tol is None else tol
    dims = (model.solid.length, model.solid.width, model.solid.height)
    if any(abs(a - b) > 1e-9 for a, b in zip(dims, spec.beam_dims)):
        raise SimulateError(
            f"scenario beam {spec.beam_dims} does not match the model solid {dims}"
        )

    scene, _truth = make_scene(spec)
    n_map = mapping_frame_count(spec)
    frames = [observe(scene, f, intr) for f in range(n_map)]
    tag_map = build_map(frames, intr, beam_id=spec.name)
    truth_tags = {t.tag_id: t for t in scene.tags}
    reg_truth = truth_tags[tag_map.gauge_tag_id].pose.inverse()

    header = SessionHeader(
        beam_id=model.beam_id,
        map_id=spec.name,
        model_hash=acim_hash(model),
        tool_ids=sorted({s.tool_id for s in spec.tools}),
    )
    writer = LogWriter(record_path, header) if record_path is not None else None
    log = writer.log if writer is not None else SessionLog(header=header)

    seq = 0
    clock = [0]

    def emit(kind: EventKind, payload: dict) -> None:
        nonlocal seq
        seq += 1
        event = SessionEvent(seq, clock[0], kind, payload)
        if writer is not None:
            writer.append(event)
        else:
            record(log, event)

    try:
        clock[0] = n_map * 100
        emit(EventKind.MAP_LOADED, {"map_id": spec.name, "tag_count": len(tag_map.tags)})

        candidates = register_to_map(model, tag_map)
        errs = [
            float(np.max(np.abs(c.pose.matrix - reg_truth.matrix))) for c in candidates
        ]
        best = int(np.argmin(errs))
        for i in range(best):
            cycle_candidate(model)
            emit(EventKind.CANDIDATE_CYCLED, {"index": i + 1})
        lock(model)
        emit(
            EventKind.MODEL_LOCKED,
            {
                "acim": serialize_acim(model),
                "registration": pose_payload(model.registration.pose),
                "candidate_index": best,
                "slide_offset": 0.0,
            },
        )

        tools = {t.tool_id: t for t in demo_toolheads()}
        mounted = None
        selected = None
        for script in sorted(spec.tools, key=lambda s: (s.start_frame, s.tool_id)):
            if script.tool_id not in tools:
                raise SimulateError(f"scenario uses unknown tool '{script.tool_id}'")
            tool = tools[script.tool_id]
            selection = _owning_selection(model, script.component_id)
            target = model.component(selection)

            clock[0] = script.start_frame * 100
            if mounted != script.tool_id:
                emit(
                    EventKind.TOOL_MOUNTED,
                    {"tool_id": script.tool_id, "acit": serialize_acit(tool)},
                )
                mounted = script.tool_id
            if selected != selection:
                emit(EventKind.COMPONENT_SELECTED, {"component_id": selection})
                selected = selection

            for f in range(script.start_frame, script.done_frame + 1):
                clock[0] = f * 100
                loc = localize(observe(scene, f, intr), tag_map, intr)
                place_cam = scene.path.placement_at(f)
                place_tool = script.placement_at(f)
                init = set_initial_pose(
                    tool,
                    FramedPose(
                        place_cam.then(place_tool.inverse()),
                        FrameTag.CAMERA,
                        FrameTag.TOOLHEAD,
                    ),
                )
                seen = observe_toolhead_at(
                    scene, scene.camera_pose(f), place_tool, tool, f, intr
                )
                tool_pose = refine_pose(tool, seen, init, intr)
                if not isinstance(loc, LocalizationFailure):
                    emit(
                        EventKind.POSE_SAMPLE,
                        {
                            "tool_id": script.tool_id,
                            "cam_in_timber": pose_payload(loc.pose),
                            "tool_in_cam": pose_payload(tool_pose.pose.pose),
                        },
                    )
                frame = make_frame(loc, tool, tool_pose, model, target, tol, timestamp=f / 10.0)
                emit(EventKind.FEEDBACK_EMITTED, feedback_payload(frame, selection))

            emit(
                EventKind.STATE_CHANGED,
                {"component_id": script.component_id, "state": "done"},
            )
            set_state(model, script.component_id, State.DONE)
            if script.component_id == selected:
                selected = None
    finally:
        if writer is not None:
            writer.close()
    return log


def cmd_simulate(args) -> int:
    spec = _load_spec(args.scenario, args.seed)
    model = (
        parse_acim(Path(args.acim).read_text(encoding="utf-8"))
        if args.acim
        else closure_model()
    )
    tol = _load_tolerances(args.tolerance_profile)
    log = simulate_session(spec, model, tol=tol, record_path=args.record)
    done = sum(
        1
        for e in log.events
        if e.kind is EventKind.STATE_CHANGED and e.payload.get("state") == "done"
    )
    print(f"simulate: {len(log.events)} events, {done} components done -> {args.record}")
    return 0


def _dump_asbuilt(built) -> str:
    lines = ["beamguide_asbuilt: 1", "cuts:"]
    for face_id, plane in built.executed_cuts:
        lines.append(f"- face_id: {face_id}")
        lines.append(f"  normal: {_fmt_vec(plane.normal)}")
        lines.append(f"  offset: {float(plane.offset):.9f}")
    lines.append("holes:")
    for hole_id, (start, direction), depth in built.executed_holes:
        lines.append(f"- hole_id: {hole_id}")
        lines.append(f"  start: {_fmt_vec(start)}")
        lines.append(f"  direction: {_fmt_vec(direction)}")
        lines.append(f"  depth: {float(depth):.9f}")
    return "\n".join(lines) + "\n"


def cmd_replay(args) -> int:
    log = import_log(Path(args.log).read_text(encoding="utf-8"))
    built, trajectory = replay(log)
    Path(args.output).write_text(_dump_asbuilt(built), encoding="utf-8")
    print(
        f"replay: {len(built.executed_cuts)} cuts, {len(built.executed_holes)} holes, "
        f"{len(trajectory)} trajectory samples -> {args.output}"
    )
    if args.scan:
        locked = next(
            (e for e in log.events if e.kind is EventKind.MODEL_LOCKED), None
        )
        if locked is None:
            raise SessionError("log has no locked model to scan against")
        model = parse_acim(locked.payload["acim"])
        cloud = synth_scan(
            model,
            built,
            args.density,
            sigma=args.scan_sigma,
            seed=args.seed if args.seed is not None else 0,
            dowel_density=args.dowel_density,
        )
        save_ply(cloud, args.scan)
        print(f"scan: {len(cloud)} points -> {args.scan}")
    return 0


def evaluate_scan(
    scan: PointCloud, model: ExecutionModel, density: float = 2.0e4, seed: int = 0
):
    """Register the scan to the nominal model and score every joint and hole.

    Returns (joint reports, perforation reports, icp result).
    """
    reference = sample_model_cloud(model, density, seed=seed)
    result = icp_register(scan, reference)
    aligned = PointCloud(
        result.pose.apply(scan.points),
        None if scan.normals is None else scan.normals @ result.pose.rotation.T,
    )
    joint_reports = []
    for joint in model.cuts:
        try:
            segment = segment_joint(aligned, model, joint.joint_id)
        except EmptySegment:
            continue
        location, correction = joint_location_error(segment, model, joint.joint_id)
        face_errors = {}
        face_angles = {}
        for face in joint.faces:
            try:
                face_errors[face.face_id] = joint_face_error(segment, face, correction)
            except EmptySegment:
                continue
            face_angles[face.face_id] = sawing_angle_deg(face.normal)
        joint_reports.append(
            JointErrorReport(
                joint.joint_id, location, face_errors, face_angles, model.solid.length
            )
        )
    perforation_reports = []
    for hole in model.holes:
        try:
            segment = segment_dowel(aligned, hole)
            perforation_reports.append(perforation_errors(segment, hole))
        except (EmptySegment, EvaluateError):
            continue
    return joint_reports, perforation_reports, result


def cmd_evaluate(args) -> int:
    scan = load_ply(args.scan)
    model = parse_acim(Path(args.acim).read_text(encoding="utf-8"))
    seed = args.seed if args.seed is not None else 0
    joints, holes, result = evaluate_scan(scan, model, density=args.density, seed=seed)
    table = summarize(joints, holes)
    Path(args.output).write_text(stats_csv(table), encoding="utf-8")
    print(
        f"evaluate: {len(joints)} joints, {len(holes)} holes, "
        f"icp rmse {result.rmse * 1000.0:.4f} mm -> {args.output}"
    )
    if args.boxplot:
        Path(args.boxplot).write_text(boxplot_csv(table), encoding="utf-8")
        print(f"boxplot: -> {args.boxplot}")
    return 0


def cmd_serve(args) -> int:
    import asyncio

    from .service import run_service

    spec = _load_spec(args.scenario, args.seed)
    model = (
        parse_acim(Path(args.acim).read_text(encoding="utf-8"))
        if args.acim
        else closure_model()
    )
    tol = _load_tolerances(args.tolerance_profile)

    def announce(port: int) -> None:
        print(f"serving ws://127.0.0.1:{port}", flush=True)

    try:
        asyncio.run(run_service(spec, model, port=args.port, tol=tol, on_ready=announce))
    except KeyboardInterrupt:
        pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beamguide", description="camera-guided timber fabrication toolkit"
    )
    parser.add_argument("--seed", type=int, default=None, help="override scenario seed")
    parser.add_argument(
        "--tolerance-profile",
        default=None,
        metavar="FILE",
        help="YAML mapping of tolerance overrides",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("map", help="build a tag map from a scenario")
    p.add_argument("scenario")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("register", help="print model-to-map registration candidates")
    p.add_argument("map")
    p.add_argument("acim")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("simulate", help="run a scripted session and record the log")
    p.add_argument("scenario")
    p.add_argument("--record", required=True, metavar="LOG")
    p.add_argument("--acim", default=None, help="model file (default: built-in closure beam)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="reconstruct the as-built model from a log")
    p.add_argument("log")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--scan", default=None, metavar="PLY", help="also synthesize a scan")
    p.add_argument("--density", type=float, default=2.0e4)
    p.add_argument("--scan-sigma", type=float, default=0.0)
    p.add_argument(
        "--dowel-density",
        type=float,
        default=None,
        help="denser sampling on dowels for the perforation line fit",
    )
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("evaluate", help="score a scan against a model")
    p.add_argument("scan")
    p.add_argument("acim")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--boxplot", default=None, metavar="CSV")
    p.add_argument("--density", type=float, default=2.0e4)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="serve a live session over WebSocket")
    p.add_argument("scenario")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--acim", default=None)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
